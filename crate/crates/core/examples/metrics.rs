//! Precision, recall, F1, AUC and point adjustment on a small hand-made
//! example.
//!
//! cargo run --example metrics

use mmad::metrics::{auc, point_adjust, precision_recall_f1};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth: [u8; 12] = [0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0];
    let pred: [u8; 12] = [0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0];
    let scores = [0.1, 0.6, 0.4, 0.9, 0.5, 0.45, 0.2, 0.1, 0.3, 0.35, 0.55, 0.05];

    let raw = precision_recall_f1(&pred, &truth)?;
    let adjusted = point_adjust(&pred, &truth)?;
    let pa = precision_recall_f1(&adjusted, &truth)?;
    println!("truth     {truth:?}");
    println!("predicted {pred:?}");
    println!("adjusted  {adjusted:?}");
    println!(
        "raw            P {:.3}  R {:.3}  F1 {:.3}",
        raw.precision, raw.recall, raw.f1
    );
    println!(
        "point-adjusted P {:.3}  R {:.3}  F1 {:.3}",
        pa.precision, pa.recall, pa.f1
    );
    println!("AUC {:.3}", auc(&scores, &truth)?);
    Ok(())
}
