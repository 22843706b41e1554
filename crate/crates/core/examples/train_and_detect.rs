//! Trains the detector on a synthetic multimodal dataset with the default
//! configuration, scores the test split and reports metrics.
//!
//! cargo run --release --example train_and_detect -- [epochs]

use std::time::Instant;

use mmad::config::Config;
use mmad::dataset::{synthesize_with, SynthSpec};
use mmad::metrics::evaluate;
use mmad::scoring::score_series;
use mmad::training::fit;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    if let Some(epochs) = std::env::args().nth(1) {
        config.epochs = epochs.parse()?;
    }
    let data = synthesize_with(&SynthSpec::default())?;
    println!(
        "{} series, {} train / {} test timestamps, {} anomalies",
        data.train.n_series(),
        data.train.len(),
        data.test.len(),
        data.anomalies.len()
    );

    let start = Instant::now();
    let state = fit(&data.train, &config, &mut |e| {
        println!(
            "epoch {:>3}  l_rec {:>9.4}  l_pred {:>7.4}  l_joint {:>9.4}",
            e.epoch, e.l_rec, e.l_pred, e.l_joint
        );
    })?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    println!(
        "threshold {:.5} via {:?}",
        state.threshold.threshold, state.threshold.method
    );

    let trace = score_series(&state, &data.test)?;
    let labels = data.test.labels().expect("synthetic test split is labeled");
    let report = evaluate(&trace.score, &trace.detected, labels, trace.warmup, trace.threshold)?;
    println!("AUC {:.4}", report.auc.unwrap_or(f64::NAN));
    println!(
        "raw            P {:.4}  R {:.4}  F1 {:.4}",
        report.raw.precision, report.raw.recall, report.raw.f1
    );
    println!(
        "point-adjusted P {:.4}  R {:.4}  F1 {:.4}",
        report.point_adjusted.precision, report.point_adjusted.recall, report.point_adjusted.f1
    );
    Ok(())
}
