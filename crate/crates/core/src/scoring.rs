//! Anomaly scores, peaks-over-threshold calibration, detection and
//! per-sensor attribution.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{TimeSeriesDataset, TEST_CLIP};
use crate::error::{Error, Result};
use crate::heads::draw_noise;
use crate::model::{infer, Batch};
use crate::training::ModelState;

/// Windows per inference batch.
const INFER_BATCH: usize = 64;
/// Mixed into the config seed for inference-time Monte-Carlo noise.
const INFER_SEED_SALT: u64 = 0x1f3d_5b79_a4c2_e680;

/// `s_i = ((1 − p_i) + γ₂ (x_i − x̂_i)²) / (1 + γ₂)` for each sensor.
pub fn per_sensor_scores(p: &[f64], x: &[f64], x_hat: &[f64], gamma2: f64) -> Vec<f64> {
    p.iter()
        .zip(x)
        .zip(x_hat)
        .map(|((&p, &x), &xh)| ((1.0 - p) + gamma2 * (x - xh).powi(2)) / (1.0 + gamma2))
        .collect()
}

/// Scores of every timestamp of one series matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub names: Vec<String>,
    /// `T × N` per-sensor scores.
    pub per_sensor: Array2<f64>,
    /// Sum over sensors, length `T`.
    pub score: Vec<f64>,
    /// Leading timestamps without a full window; scored 0, never flagged.
    pub warmup: usize,
    pub threshold: f64,
    pub detected: Vec<u8>,
}

impl ScoreTrace {
    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    /// Replaces the threshold and recomputes detections.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.detected = detect(&self.score, self.warmup, threshold);
        self.threshold = threshold;
        self
    }

    /// Scores after the warm-up region.
    pub fn scored(&self) -> &[f64] {
        &self.score[self.warmup.min(self.score.len())..]
    }

    /// CSV `t,score,detected,s_1..s_N` preceded by `#` comment lines.
    pub fn write_csv(&self, out: &mut impl Write, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "# threshold {:e}", self.threshold)?;
        writeln!(out, "# warmup {}", self.warmup)?;
        write!(out, "t,score,detected")?;
        for i in 1..=self.names.len() {
            write!(out, ",s_{i}")?;
        }
        writeln!(out)?;
        for (t, row) in self.per_sensor.axis_iter(Axis(0)).enumerate() {
            write!(out, "{t},{:e},{}", self.score[t], self.detected[t])?;
            for v in row {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, header: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w, header)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a trace written by [`ScoreTrace::save`]; `names` label the
    /// sensor columns in order.
    pub fn load(path: &Path, names: &[String]) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let fname = path.display().to_string();
        let cell = |row: usize, column: &str, message: String| Error::Cell {
            file: fname.clone(),
            row,
            column: column.to_string(),
            message,
        };
        let mut threshold = f64::INFINITY;
        let mut warmup = 0;
        let mut header_seen = false;
        let mut score = Vec::new();
        let mut detected = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = i + 1;
            if let Some(c) = line.strip_prefix('#') {
                let mut parts = c.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("threshold"), Some(v)) => {
                        threshold = v
                            .parse()
                            .map_err(|_| cell(lineno, "threshold", format!("bad value `{v}`")))?
                    }
                    (Some("warmup"), Some(v)) => {
                        warmup = v
                            .parse()
                            .map_err(|_| cell(lineno, "warmup", format!("bad value `{v}`")))?
                    }
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if !header_seen {
                header_seen = true;
                if fields.len() != 3 + names.len() {
                    return Err(Error::Data(format!(
                        "{fname}: trace has {} sensor columns, model has {} series",
                        fields.len().saturating_sub(3),
                        names.len()
                    )));
                }
                continue;
            }
            if fields.len() != 3 + names.len() {
                return Err(cell(
                    lineno,
                    "t",
                    format!("expected {} fields, found {}", 3 + names.len(), fields.len()),
                ));
            }
            let num = |k: usize, col: &str| -> Result<f64> {
                fields[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| cell(lineno, col, format!("not a number: `{}`", fields[k])))
            };
            score.push(num(1, "score")?);
            detected.push(u8::from(num(2, "detected")? != 0.0));
            for k in 0..names.len() {
                rows.push(num(3 + k, &format!("s_{}", k + 1))?);
            }
        }
        let t = score.len();
        let per_sensor = Array2::from_shape_vec((t, names.len()), rows).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ScoreTrace {
            names: names.to_vec(),
            per_sensor,
            score,
            warmup: warmup.min(t),
            threshold,
            detected,
        })
    }
}

/// Labels each timestamp after the warm-up: 1 iff `score > threshold`.
pub fn detect(score: &[f64], warmup: usize, threshold: f64) -> Vec<u8> {
    score
        .iter()
        .enumerate()
        .map(|(t, &s)| u8::from(t >= warmup && s > threshold))
        .collect()
}

/// Scores a dataset already normalized with the model's statistics. The
/// score at `t` combines the reconstruction of the window ending at `t`
/// with the forecast for `t` made from the window ending at `t − 1`.
pub fn score_normalized(state: &ModelState, ds: &TimeSeriesDataset) -> Result<ScoreTrace> {
    if ds.names() != state.names.as_slice() {
        return Err(Error::Data("dataset series do not match the model".into()));
    }
    let cfg = &state.config;
    let w = cfg.window;
    let values = ds.values();
    let (n, t_len) = values.dim();
    let mut per_sensor = Array2::zeros((t_len, n));
    if t_len > w {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INFER_SEED_SALT);
        // Window ends (exclusive) w..=T: reconstruction for end-1, forecast for end.
        let ends: Vec<usize> = (w..=t_len).collect();
        let mut prob = Array2::zeros((t_len, n));
        let mut forecast = Array2::zeros((t_len, n));
        for chunk in ends.chunks(INFER_BATCH) {
            let batch = Batch::gather(values.view(), w, chunk)?;
            let noise = draw_noise(&mut rng, chunk.len(), cfg.infer_samples, cfg.latent_dim);
            let out = infer(&state.params, &state.topology, batch.x.view(), noise.view())?;
            for (b, &end) in chunk.iter().enumerate() {
                prob.row_mut(end - 1).assign(&out.vae.probability.row(b));
                if end < t_len {
                    forecast.row_mut(end).assign(&out.forecast.row(b));
                }
            }
        }
        for t in w..t_len {
            let p = prob.row(t).to_vec();
            let x = values.column(t).to_vec();
            let xh = forecast.row(t).to_vec();
            let s = per_sensor_scores(&p, &x, &xh, cfg.gamma2);
            per_sensor.row_mut(t).assign(&ndarray::Array1::from(s));
        }
    }
    if per_sensor.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numeric("non-finite anomaly score".into()));
    }
    let score: Vec<f64> = per_sensor.sum_axis(Axis(1)).to_vec();
    let warmup = w.min(t_len);
    let detected = detect(&score, warmup, state.threshold.threshold);
    Ok(ScoreTrace {
        names: state.names.clone(),
        per_sensor,
        score,
        warmup,
        threshold: state.threshold.threshold,
        detected,
    })
}

/// Aligns raw test data to the model by series name, normalizes it with the
/// training statistics (clipped) and scores it.
pub fn score_series(state: &ModelState, raw: &TimeSeriesDataset) -> Result<ScoreTrace> {
    let aligned = raw.align_to(&state.names, &state.modality)?;
    let normalized = state.norm.apply(&aligned, Some(TEST_CLIP))?;
    score_normalized(state, &normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotMethod {
    Gpd,
    /// Shape estimate indistinguishable from 0.
    Exponential,
    /// Too few excesses or a degenerate fit.
    Empirical,
    /// All scores equal.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotResult {
    pub threshold: f64,
    pub method: PotMethod,
    /// Initial threshold `u`.
    pub init_threshold: f64,
    pub n_excess: usize,
    /// Fitted GPD shape and scale, when a fit was attempted and succeeded.
    pub xi: Option<f64>,
    pub sigma: Option<f64>,
}

pub const MIN_POT_SAMPLES: usize = 50;
const MIN_EXCESSES: usize = 10;
const XI_ZERO: f64 = 1e-9;

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * level.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Generalized Pareto maximum-likelihood estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdFit {
    pub xi: f64,
    pub sigma: f64,
    pub log_likelihood: f64,
}

/// Profile log-likelihood in `θ = ξ/σ`: for fixed `θ` the optimal shape is
/// `ξ = mean ln(1 + θ y)`, leaving a one-dimensional search.
fn profile(y: &[f64], theta: f64) -> Option<GpdFit> {
    let n = y.len() as f64;
    if theta == 0.0 {
        let sigma = y.iter().sum::<f64>() / n;
        return (sigma > 0.0).then(|| GpdFit {
            xi: 0.0,
            sigma,
            log_likelihood: -n * sigma.ln() - n,
        });
    }
    let mut acc = 0.0;
    for &v in y {
        let a = 1.0 + theta * v;
        if a <= 0.0 {
            return None;
        }
        acc += a.ln();
    }
    let xi = acc / n;
    let sigma = xi / theta;
    if sigma.is_nan() || sigma <= 0.0 || !xi.is_finite() {
        return None;
    }
    Some(GpdFit {
        xi,
        sigma,
        log_likelihood: -n * sigma.ln() - n * xi - n,
    })
}

/// Maximum-likelihood GPD fit of positive excesses by grid search over the
/// profile parameter followed by golden-section refinement.
pub fn fit_gpd(excesses: &[f64]) -> Option<GpdFit> {
    let y: Vec<f64> = excesses.iter().copied().filter(|v| *v > 0.0).collect();
    if y.len() < 2 {
        return None;
    }
    let ymax = y.iter().copied().fold(0.0, f64::max);
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let steps = 400;
    let mut grid = vec![0.0];
    // Negative side: θ = −u / ymax, u ∈ (0, 1).
    for k in 0..steps {
        let u = 10f64.powf(-8.0 + 8.0 * k as f64 / steps as f64) * (1.0 - 1e-9);
        grid.push(-u / ymax);
    }
    // Positive side up to Grimshaw's bound.
    let upper = (2.0 * (mean - ymin) / (ymin * ymin)).clamp(1e-6 / mean, 1e8 / mean);
    let lower = 1e-8 / mean;
    if upper > lower {
        let ratio = (upper / lower).ln();
        for k in 0..=steps {
            grid.push(lower * (ratio * k as f64 / steps as f64).exp());
        }
    }
    grid.sort_by(f64::total_cmp);
    let ll = |t: f64| profile(&y, t).map_or(f64::NEG_INFINITY, |f| f.log_likelihood);
    let (best_idx, _) = grid
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, ll(t)))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let (mut a, mut b) = (
        grid[best_idx.saturating_sub(1)],
        grid[(best_idx + 1).min(grid.len() - 1)],
    );
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    for _ in 0..200 {
        if ll(c) > ll(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - phi * (b - a);
        d = a + phi * (b - a);
    }
    let candidates = [grid[best_idx], (a + b) / 2.0, 0.0];
    candidates
        .iter()
        .filter_map(|&t| profile(&y, t))
        .max_by(|x, y| x.log_likelihood.total_cmp(&y.log_likelihood))
}

/// Level exceeded with probability `q`, from a GPD tail above the
/// `init_level` quantile. Falls back to the empirical `1 − q` quantile when
/// fewer than 10 scores exceed `u` or the fit is degenerate.
pub fn pot_threshold(scores: &[f64], q: f64, init_level: f64) -> Result<PotResult> {
    if !(0.0 < q && q < init_level && init_level < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < q ({q}) < init_level ({init_level}) < 1"
        )));
    }
    if scores.len() < MIN_POT_SAMPLES {
        return Err(Error::Data(format!(
            "POT needs at least {MIN_POT_SAMPLES} scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in POT input".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Ok(PotResult {
            threshold: hi + f64::EPSILON * hi.abs().max(1.0),
            method: PotMethod::Constant,
            init_threshold: hi,
            n_excess: 0,
            xi: None,
            sigma: None,
        });
    }
    let u = quantile_sorted(&sorted, init_level);
    let excesses: Vec<f64> = sorted.iter().filter(|&&s| s > u).map(|s| s - u).collect();
    let n = sorted.len() as f64;
    let nu = excesses.len();
    let empirical = |xi: Option<f64>, sigma: Option<f64>| PotResult {
        threshold: quantile_sorted(&sorted, 1.0 - q),
        method: PotMethod::Empirical,
        init_threshold: u,
        n_excess: nu,
        xi,
        sigma,
    };
    if nu < MIN_EXCESSES {
        return Ok(empirical(None, None));
    }
    let Some(fit) = fit_gpd(&excesses) else {
        return Ok(empirical(None, None));
    };
    let r = q * n / nu as f64;
    let (threshold, method) = if fit.xi.abs() < XI_ZERO {
        (u + fit.sigma * (1.0 / r).ln(), PotMethod::Exponential)
    } else {
        (u + fit.sigma / fit.xi * (r.powf(-fit.xi) - 1.0), PotMethod::Gpd)
    };
    if !threshold.is_finite() {
        return Ok(empirical(Some(fit.xi), Some(fit.sigma)));
    }
    Ok(PotResult {
        threshold,
        method,
        init_threshold: u,
        n_excess: nu,
        xi: Some(fit.xi),
        sigma: Some(fit.sigma),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorScore {
    pub series: String,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    /// Inclusive timestamp range.
    pub interval: [usize; 2],
    pub ranking: Vec<SensorScore>,
    pub top1: String,
}

/// Ranks sensors by mean score over `a..=b`, descending; ties keep the
/// series order.
pub fn interpret(trace: &ScoreTrace, a: usize, b: usize) -> Result<Interpretation> {
    if a > b || b >= trace.len() {
        return Err(Error::Data(format!(
            "interval {a}:{b} is outside the trace range 0:{}",
            trace.len().saturating_sub(1)
        )));
    }
    let len = (b - a + 1) as f64;
    let mut ranking: Vec<SensorScore> = trace
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| SensorScore {
            series: name.clone(),
            mean_score: trace.per_sensor.column(i).slice(ndarray::s![a..=b]).sum() / len,
        })
        .collect();
    ranking.sort_by(|x, y| y.mean_score.total_cmp(&x.mean_score));
    let top1 = ranking[0].series.clone();
    Ok(Interpretation {
        interval: [a, b],
        ranking,
        top1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn score_formula_examples() {
        assert_eq!(per_sensor_scores(&[1.0], &[0.3], &[0.3], 0.8), vec![0.0]);
        let s = per_sensor_scores(&[0.5], &[1.0], &[0.5], 0.8)[0];
        assert!(close(s, 0.7 / 1.8, 1e-12) && close(s, 0.38889, 1e-5));
        assert_eq!(per_sensor_scores(&[0.25], &[3.0], &[0.0], 0.0), vec![0.75]);
    }

    #[test]
    fn detect_is_strict_and_skips_warm_up() {
        assert_eq!(detect(&[5.0, 1.0, 2.0, 3.0], 1, 2.0), vec![0, 0, 0, 1]);
        assert_eq!(detect(&[0.0, 0.0, 0.0], 1, f64::NEG_INFINITY), vec![0, 1, 1]);
    }

    #[test]
    fn constant_scores_use_epsilon_fallback() {
        let r = pot_threshold(&[0.4; 100], 1e-3, 0.98).unwrap();
        assert_eq!(r.method, PotMethod::Constant);
        assert!(r.threshold > 0.4);
        assert!(detect(&[0.4; 100], 0, r.threshold).iter().all(|&d| d == 0));
    }

    #[test]
    fn few_excesses_fall_back_to_empirical_quantile() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let r = pot_threshold(&scores, 0.01, 0.95).unwrap();
        assert_eq!(r.method, PotMethod::Empirical);
        assert!(close(r.threshold, quantile_sorted(&scores, 0.99), 1e-12));
        let scaled: Vec<f64> = scores.iter().map(|s| 3.0 * s).collect();
        let r2 = pot_threshold(&scaled, 0.01, 0.95).unwrap();
        assert!(close(r2.threshold, 3.0 * r.threshold, 1e-9));
    }

    #[test]
    fn too_few_scores_rejected() {
        assert!(pot_threshold(&[1.0; 10], 1e-3, 0.98).is_err());
    }

    #[test]
    fn exponential_tail_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..20_000).map(|_| -(1.0 - rng.random::<f64>()).ln() * 2.0).collect();
        let r = pot_threshold(&scores, 1e-3, 0.9).unwrap();
        let analytic = 2.0 * (1000f64).ln();
        assert!(r.xi.unwrap().abs() < 0.1, "xi {:?}", r.xi);
        assert!(
            (r.threshold - analytic).abs() / analytic < 0.05,
            "{} vs {analytic}",
            r.threshold
        );
        // With the shape pinned to zero the threshold is u + σ ln(N_u / qn).
        let sorted = {
            let mut s = scores.clone();
            s.sort_by(f64::total_cmp);
            s
        };
        let u = quantile_sorted(&sorted, 0.9);
        let exc: Vec<f64> = sorted.iter().filter(|&&s| s > u).map(|s| s - u).collect();
        let sigma = exc.iter().sum::<f64>() / exc.len() as f64;
        let closed = u + sigma * (exc.len() as f64 / (1e-3 * 20_000.0)).ln();
        assert!((closed - analytic).abs() / analytic < 0.05);
    }

    #[test]
    fn gpd_fit_recovers_known_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (xi, sigma) = (0.2, 1.5);
        let y: Vec<f64> = (0..20_000)
            .map(|_| sigma / xi * ((1.0 - rng.random::<f64>()).powf(-xi) - 1.0))
            .collect();
        let fit = fit_gpd(&y).unwrap();
        assert!(close(fit.xi, xi, 0.03), "{fit:?}");
        assert!(close(fit.sigma, sigma, 0.06), "{fit:?}");
    }

    fn toy_trace() -> ScoreTrace {
        let per_sensor = Array2::from_shape_fn((6, 3), |(t, i)| if i == 1 && t >= 3 { 2.0 } else { 0.1 });
        let score = per_sensor.sum_axis(Axis(1)).to_vec();
        ScoreTrace {
            names: vec!["a".into(), "b".into(), "c".into()],
            per_sensor,
            detected: detect(&score, 2, 1.0),
            score,
            warmup: 2,
            threshold: 1.0,
        }
    }

    #[test]
    fn interpret_ranks_by_mean_with_stable_ties() {
        let tr = toy_trace();
        let r = interpret(&tr, 3, 5).unwrap();
        assert_eq!(r.top1, "b");
        let tied = interpret(&tr, 0, 2).unwrap();
        let order: Vec<&str> = tied.ranking.iter().map(|s| s.series.as_str()).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert!(interpret(&tr, 4, 6).is_err());
        assert!(interpret(&tr, 3, 2).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let tr = toy_trace();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        tr.save(&path, &["mmad 0.1.0 config abc".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("t,score,detected,s_1,s_2,s_3"));
        assert_eq!(ScoreTrace::load(&path, &tr.names).unwrap(), tr);
    }
}
