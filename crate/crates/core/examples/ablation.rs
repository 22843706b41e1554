//! Trains the full model and the four cumulative ablations on the same
//! synthetic data and compares test AUC and F1.
//!
//! cargo run --release --example ablation -- [epochs]

use mmad::config::{Ablation, Config};
use mmad::dataset::{synthesize_with, SynthSpec};
use mmad::metrics::evaluate;
use mmad::scoring::score_series;
use mmad::training::fit;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let data = synthesize_with(&SynthSpec::default())?;
    let labels = data.test.labels().expect("test split is labeled");
    let steps = ["full", "- modal", "- temporal", "- topk", "- attention"];
    for (step, name) in steps.iter().enumerate() {
        let config = Config {
            epochs,
            ablation: Ablation::ladder(step),
            ..Config::default()
        };
        let state = fit(&data.train, &config, &mut |_| {})?;
        let trace = score_series(&state, &data.test)?;
        let r = evaluate(&trace.score, &trace.detected, labels, trace.warmup, trace.threshold)?;
        println!("{name:<12} AUC {:.4}  F1 {:.4}", r.auc.unwrap_or(f64::NAN), r.raw.f1);
    }
    Ok(())
}
