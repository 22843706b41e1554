//! Trains on synthetic data, scores the test split and ranks the sensors
//! responsible for each injected anomaly.
//!
//! cargo run --release --example interpret -- [epochs]

use mmad::config::Config;
use mmad::dataset::{synthesize_with, SynthSpec};
use mmad::scoring::{interpret, score_series};
use mmad::training::fit;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let config = Config {
        epochs,
        ..Config::default()
    };
    let data = synthesize_with(&SynthSpec::default())?;
    let state = fit(&data.train, &config, &mut |_| {})?;
    let trace = score_series(&state, &data.test)?;

    let mut hits = 0;
    for a in &data.anomalies {
        let verdict = interpret(&trace, a.start, a.end - 1)?;
        let truth = &data.test.names()[a.series];
        hits += usize::from(&verdict.top1 == truth);
        let top3: Vec<String> = verdict
            .ranking
            .iter()
            .take(3)
            .map(|s| format!("{} {:.3}", s.series, s.mean_score))
            .collect();
        println!(
            "{:<14} [{:>4}, {:>4}) injected {truth:<8} ranked {}",
            format!("{:?}", a.kind),
            a.start,
            a.end,
            top3.join(", ")
        );
    }
    println!("top-1 localized {hits}/{}", data.anomalies.len());
    Ok(())
}
