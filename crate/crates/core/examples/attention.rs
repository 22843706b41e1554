//! Trains briefly on synthetic data, then prints the learned graph-attention
//! and relation weights of the first layer for one test window.
//!
//! cargo run --release --example attention -- [epochs]

use mmad::config::Config;
use mmad::dataset::{synthesize_with, SynthSpec};
use mmad::mgat::attention_coefficients;
use mmad::training::fit;
use ndarray::s;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let config = Config {
        epochs,
        topk: 4,
        ..Config::default()
    };
    let data = synthesize_with(&SynthSpec::default())?;
    let state = fit(&data.train, &config, &mut |_| {})?;

    let test = state.norm.apply(&data.test, None)?;
    let end = 500;
    let window = test.values().slice(s![.., end - config.window..end]).to_owned();
    let records = attention_coefficients(
        &state.params.mgat,
        state.params.embedding.view(),
        &state.topology,
        window.view(),
    )?;
    let rec = &records[0];
    let names = &state.names;
    let fmt = |row: &[(usize, f64)]| -> String {
        row.iter()
            .map(|(j, w)| format!("{}:{w:.2}", names[*j]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("window ending at t={end}, layer 0, head 0");
    for (i, name) in names.iter().enumerate() {
        println!("{name:<8} alpha  {}", fmt(&rec.alpha[0][i]));
        println!("{:<8} intra  {}", "", fmt(&rec.beta_intra[i]));
        println!("{:<8} inter  {}", "", fmt(&rec.beta_inter[i]));
    }
    Ok(())
}
