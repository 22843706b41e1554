//! Peaks-over-threshold calibration on samples with a known tail: a
//! generalized Pareto, an exponential and a constant series.
//!
//! cargo run --release --example pot_threshold -- [q]

use mmad::scoring::pot_threshold;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (xi, sigma) = (0.1, 1.0);
    let gpd: Vec<f64> = (0..10_000)
        .map(|_| sigma / xi * ((1.0 - rng.random::<f64>()).powf(-xi) - 1.0))
        .collect();
    let expo: Vec<f64> = (0..10_000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();

    let cases = [
        ("GPD(0.1, 1)", gpd, sigma / xi * (q.powf(-xi) - 1.0)),
        ("Exp(1)", expo, -q.ln()),
        ("constant 3", vec![3.0; 500], 3.0),
    ];
    println!("q = {q}");
    for (name, samples, exact) in cases {
        let r = pot_threshold(&samples, q, 0.98)?;
        println!(
            "{name:<12} z_q {:>9.4}  exact {exact:>9.4}  via {:?} (u {:.3}, {} excesses, xi {})",
            r.threshold,
            r.method,
            r.init_threshold,
            r.n_excess,
            r.xi.map_or("-".into(), |x| format!("{x:.3}"))
        );
    }
    Ok(())
}
