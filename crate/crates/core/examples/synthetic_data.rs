//! Generates the synthetic multimodal benchmark, prints its shape and the
//! injected anomaly schedule, and writes it as CSV.
//!
//! cargo run --example synthetic_data -- [out_dir]

use std::path::PathBuf;

use mmad::dataset::{synthesize_with, write_labels, write_modalities, write_values_csv, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec::default();
    let data = synthesize_with(&spec)?;
    let ds = &data.train;
    println!("{} series in {} modalities", ds.n_series(), spec.n_modalities);
    for (name, m) in ds.names().iter().zip(ds.modality()) {
        println!("  {name:<8} modality {m}");
    }
    let labels = data.test.labels().expect("test split is labeled");
    let anomalous = labels.iter().filter(|&&l| l == 1).count();
    println!(
        "train {} steps, test {} steps, {anomalous} anomalous ({:.1}%)",
        ds.len(),
        data.test.len(),
        100.0 * anomalous as f64 / labels.len() as f64
    );
    for a in &data.anomalies {
        println!(
            "  {:<14} {:<8} [{}, {})",
            format!("{:?}", a.kind),
            ds.names()[a.series],
            a.start,
            a.end
        );
    }

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        std::fs::create_dir_all(&dir)?;
        write_values_csv(&data.train, &dir.join("train.csv"), &[])?;
        write_values_csv(&data.test, &dir.join("test.csv"), &[])?;
        write_labels(labels, &dir.join("labels.csv"), &[])?;
        write_modalities(&data.train, &dir.join("modalities.json"))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
