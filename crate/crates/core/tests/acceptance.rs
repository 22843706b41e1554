//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any fails. The end-to-end model is trained once and shared by
//! the criteria that need it.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mmad::config::{Ablation, Config};
use mmad::dataset::{synthesize_with, AnomalyKind, SynthSpec, SyntheticData, TimeSeriesDataset};
use mmad::graph::{cosine_similarity, GraphTopology};
use mmad::metrics::{evaluate, f1_score, MetricsReport};
use mmad::mgat::{attention_coefficients, MgatConfig, MgatParams};
use mmad::model::joint_loss;
use mmad::scoring::{detect, interpret, per_sensor_scores, pot_threshold, score_series, PotMethod};
use mmad::temporal::Pooling;
use mmad::training::{fit, ModelState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn brute_topk(sim: &Array2<f64>, i: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]).then(a.cmp(&b)));
    c.truncate(k);
    c.sort();
    c
}

fn structural_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut failures = Vec::new();
    for case in 0..100 {
        let n = rng.random_range(1..=30);
        let m = rng.random_range(1..=5usize.min(n));
        let k = rng.random_range(1..=n);
        let mut modality: Vec<usize> = (0..n)
            .map(|i| if i < m { i + 1 } else { rng.random_range(1..=m) })
            .collect();
        modality.rotate_left(rng.random_range(0..n));
        let emb = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-1.0..1.0));
        let topo = GraphTopology::build(emb.view(), &modality, k).unwrap();
        let sim = cosine_similarity(emb.view()).unwrap();
        let all: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let same: Vec<usize> = all.iter().copied().filter(|&j| modality[j] == modality[i]).collect();
            let other: Vec<usize> = all.iter().copied().filter(|&j| modality[j] != modality[i]).collect();
            let got = |adj: &mmad::graph::Adjacency| {
                let mut v = adj.neighbors[i].clone();
                v.sort();
                v
            };
            if topo.topk.degree(i) != k.min(n) || got(&topo.topk) != brute_topk(&sim, i, &all, k) {
                failures.push(format!("case {case}: topk row {i}"));
            }
            if got(&topo.intra) != brute_topk(&sim, i, &same, k) || got(&topo.inter) != brute_topk(&sim, i, &other, k) {
                failures.push(format!("case {case}: modal rows {i}"));
            }
            for j in 0..n {
                let (a, b) = (topo.intra.contains(i, j), topo.inter.contains(i, j));
                if (a && b) || (a && modality[i] != modality[j]) || (b && modality[i] == modality[j]) {
                    failures.push(format!("case {case}: relation constraint ({i},{j})"));
                }
            }
        }
        let cfg = MgatConfig {
            window: 6,
            embed_dim: 4,
            heads: 2,
            layers: rng.random_range(1..=2),
            lift_channels: 3,
            time_channels: 4,
            relation_hidden: 5,
            modal: true,
            attention: true,
        };
        let params = MgatParams::new(cfg, &mut rng).unwrap();
        let window = Array2::from_shape_simple_fn((n, 6), || rng.random_range(-1.0..1.0));
        for rec in attention_coefficients(&params, emb.view(), &topo, window.view()).unwrap() {
            let rows = rec
                .alpha
                .iter()
                .flatten()
                .chain(rec.beta_intra.iter())
                .chain(rec.beta_inter.iter());
            for row in rows.filter(|r| !r.is_empty()) {
                let sum: f64 = row.iter().map(|(_, w)| w).sum();
                if (sum - 1.0).abs() > 1e-6 {
                    failures.push(format!("case {case}: weights sum to {sum}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let first = failures.first().cloned().unwrap_or_default();
    outcome(
        pass,
        format!("100 configurations, {} violations {first}, {secs:.1}s", failures.len()),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let e2e = common::end_to_end();
    let modules = [
        ("mgat", common::mgat_error(true, true, 1)),
        ("mgat-2layer", common::mgat_error(true, true, 2)),
        ("mgat-ablated", common::mgat_error(false, false, 1)),
        ("temporal-mean", common::temporal_error(Pooling::Mean, 2)),
        ("temporal-max", common::temporal_error(Pooling::Max, 1)),
        ("heads", common::heads_error()),
    ];
    let secs = start.elapsed().as_secs_f64();
    let worst = modules.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let pass = e2e.max_rel_error < 1e-3 && e2e.checked > 0 && worst < 1e-4 && secs < 120.0;
    let per: Vec<String> = modules.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        pass,
        format!(
            "end-to-end {:.1e} over {} params; {}; {secs:.1}s",
            e2e.max_rel_error,
            e2e.checked,
            per.join(", ")
        ),
    )
}

fn gpd_samples(n: usize, xi: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| sigma / xi * ((1.0 - rng.random::<f64>()).powf(-xi) - 1.0))
        .collect()
}

fn pot_fidelity() -> Outcome {
    let (xi, sigma, q, level): (f64, f64, f64, f64) = (0.1, 1.0, 1e-3, 0.98);
    let analytic = sigma / xi * (q.powf(-xi) - 1.0);
    let r = pot_threshold(&gpd_samples(10_000, xi, sigma, 0), q, level).unwrap();
    let rel = (r.threshold - analytic).abs() / analytic;
    let within = (0..40)
        .filter(|&s| {
            let z = pot_threshold(&gpd_samples(10_000, xi, sigma, s), q, level)
                .unwrap()
                .threshold;
            (z - analytic).abs() / analytic < 0.05
        })
        .count();

    let constant = pot_threshold(&[2.5; 100], q, level).unwrap();
    let constant_ok = constant.method == PotMethod::Constant
        && constant.threshold > 2.5
        && constant.threshold - 2.5 <= 4.0 * f64::EPSILON
        && detect(&[2.5; 100], 0, constant.threshold).iter().all(|&d| d == 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let few: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
    let empirical = pot_threshold(&few, q, level).unwrap();
    let expo: Vec<f64> = (0..20_000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let e = pot_threshold(&expo, q, 0.9).unwrap();
    let expo_ok = (e.threshold - (1.0 / q).ln()).abs() / (1.0 / q).ln() < 0.05;
    let short = pot_threshold(&few[..20], q, level).is_err();

    let pass = rel < 0.05
        && r.method == PotMethod::Gpd
        && constant_ok
        && empirical.method == PotMethod::Empirical
        && expo_ok
        && short;
    outcome(
        pass,
        format!(
            "z_q {:.4} vs analytic {analytic:.4} (rel {rel:.4}, xi {:.3}); {within}/40 seeds within 5%; \
             constant {constant_ok}, empirical {:?}, exponential {expo_ok}, <50 rejected {short}",
            r.threshold,
            r.xi.unwrap_or(f64::NAN),
            empirical.method
        ),
    )
}

fn formula_reproduction() -> Outcome {
    let f1 = f1_score(0.9506, 0.8910);
    let s_zero = per_sensor_scores(&[1.0], &[0.3], &[0.3], 0.8)[0];
    let s_mid = per_sensor_scores(&[0.5], &[0.5], &[0.0], 0.8)[0];
    let s_rec = per_sensor_scores(&[0.35], &[1.0], &[0.2], 0.0)[0];
    let jl = joint_loss(2.0, 4.0, 0.5);
    let pass = (f1 - 0.9198).abs() <= 1e-4
        && s_zero == 0.0
        && (s_mid - 0.7 / 1.8).abs() < 1e-12
        && (s_mid - 0.38889).abs() < 1e-5
        && (s_rec - 0.65).abs() < 1e-12
        && jl == 3.0;
    outcome(
        pass,
        format!("F1 {f1:.4}; s(p=1,e=0) {s_zero}; s(0.5,0.25,0.8) {s_mid:.5}; s(γ₂=0) {s_rec:.2}; joint {jl}"),
    )
}

/// Fraction of injected intervals caught by a per-series 3σ detector on the
/// residual of each series regressed on the mean of its modality peers
/// (fitted on the training split).
fn sanity_floor(data: &SyntheticData) -> (usize, usize) {
    let peers = |ds: &TimeSeriesDataset, i: usize| -> Vec<f64> {
        let m = ds.modality();
        let idx: Vec<usize> = (0..m.len()).filter(|&j| j != i && m[j] == m[i]).collect();
        (0..ds.len())
            .map(|t| idx.iter().map(|&j| ds.values()[[j, t]]).sum::<f64>() / idx.len() as f64)
            .collect()
    };
    let mut caught = 0;
    for a in &data.anomalies {
        let i = a.series;
        let (p, x) = (peers(&data.train, i), data.train.values().row(i).to_vec());
        let n = x.len() as f64;
        let (mp, mx) = (p.iter().sum::<f64>() / n, x.iter().sum::<f64>() / n);
        let slope = p.iter().zip(&x).map(|(p, x)| (p - mp) * (x - mx)).sum::<f64>()
            / p.iter().map(|p| (p - mp).powi(2)).sum::<f64>();
        let icpt = mx - slope * mp;
        let sd = (p
            .iter()
            .zip(&x)
            .map(|(p, x)| (x - icpt - slope * p).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let pt = peers(&data.test, i);
        let te = data.test.values();
        if (a.start..a.end).any(|t| (te[[i, t]] - icpt - slope * pt[t]).abs() > 3.0 * sd) {
            caught += 1;
        }
    }
    (caught, data.anomalies.len())
}

struct Trained {
    state: ModelState,
    report: MetricsReport,
    secs: f64,
}

fn train_and_score(data: &SyntheticData, config: &Config) -> Trained {
    let start = Instant::now();
    let state = fit(&data.train, config, &mut |_| {}).expect("training succeeds");
    let secs = start.elapsed().as_secs_f64();
    let trace = score_series(&state, &data.test).expect("scoring succeeds");
    let labels = data.test.labels().expect("test split is labeled");
    let report = evaluate(&trace.score, &trace.detected, labels, trace.warmup, trace.threshold).unwrap();
    Trained { state, report, secs }
}

fn desk_scale(full: &Trained, floor: (usize, usize)) -> Outcome {
    let auc = full.report.auc.unwrap_or(0.0);
    let f1 = full.report.raw.f1;
    let pass = floor.0 == floor.1 && full.secs <= 300.0 && auc >= 0.85 && f1 >= 0.60;
    outcome(
        pass,
        format!(
            "sanity floor {}/{} intervals; trained in {:.0}s; AUC {auc:.4}, F1 {f1:.4} (P {:.4}, R {:.4}), \
             point-adjusted F1 {:.4}, threshold {:.4} via {:?}",
            floor.0,
            floor.1,
            full.secs,
            full.report.raw.precision,
            full.report.raw.recall,
            full.report.point_adjusted.f1,
            full.state.threshold.threshold,
            full.state.threshold.method
        ),
    )
}

fn ablation_direction(data: &SyntheticData, config: &Config, full_auc: f64) -> Outcome {
    let names = ["- Modal", "- Temp", "- TopK", "- Att"];
    let aucs: Vec<f64> = (1..=4)
        .map(|step| {
            let cfg = Config {
                ablation: Ablation::ladder(step),
                ..config.clone()
            };
            train_and_score(data, &cfg).report.auc.unwrap_or(0.0)
        })
        .collect();
    let bounded = aucs.iter().all(|&a| a <= full_auc + 0.02);
    let worst = aucs[3] < aucs[..3].iter().copied().fold(f64::INFINITY, f64::min);
    let listing: Vec<String> = names.iter().zip(&aucs).map(|(n, a)| format!("{n} {a:.4}")).collect();
    outcome(bounded && worst, format!("full {full_auc:.4}; {}", listing.join(", ")))
}

fn interpretation(state: &ModelState) -> Outcome {
    let mut hits = 0;
    let mut total = 0;
    let mut misses = Vec::new();
    let mut anomaly_seed = 1;
    while total < 20 {
        let spec = SynthSpec {
            anomaly_seed: Some(anomaly_seed),
            kinds: vec![AnomalyKind::Decorrelation],
            ..SynthSpec::default()
        };
        anomaly_seed += 1;
        let data = synthesize_with(&spec).unwrap();
        let trace = score_series(state, &data.test).unwrap();
        for a in &data.anomalies {
            if total == 20 {
                break;
            }
            total += 1;
            let verdict = interpret(&trace, a.start, a.end - 1).unwrap();
            if verdict.top1 == data.test.names()[a.series] {
                hits += 1;
            } else {
                misses.push(format!(
                    "{}@{}..{}→{}",
                    data.test.names()[a.series],
                    a.start,
                    a.end,
                    verdict.top1
                ));
            }
        }
    }
    outcome(
        hits >= 18,
        format!("{hits}/{total} intervals localized; misses: [{}]", misses.join(", ")),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_mmad"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let config = Config {
        window: 16,
        embed_dim: 16,
        topk: 5,
        conv_kernel: 5,
        latent_dim: 8,
        epochs: 2,
        seed: 11,
        ..Config::default()
    };
    std::fs::write(d.join("config.toml"), config.to_toml_string()).unwrap();
    let spec = SynthSpec {
        train_len: 1200,
        test_len: 600,
        ..SynthSpec::default()
    };
    std::fs::write(d.join("spec.toml"), toml::to_string(&spec).unwrap()).unwrap();
    let mut ok = run_cli(&["synth", "--spec", &p("spec.toml"), "--out-dir", &p("data")]);
    for run in ["a", "b"] {
        ok &= run_cli(&[
            "train",
            "--config",
            &p("config.toml"),
            "--train-data",
            &p("data/train.csv"),
            "--modalities",
            &p("data/modalities.json"),
            "--out",
            &p(run),
        ]);
        ok &= run_cli(&[
            "detect",
            "--model",
            &p(&format!("{run}/model.ckpt")),
            "--test-data",
            &p("data/test.csv"),
            "--labels",
            &p("data/labels.csv"),
            "--out",
            &p(&format!("{run}/detect")),
        ]);
    }
    ok &= run_cli(&[
        "detect",
        "--model",
        &p("a/model.ckpt"),
        "--test-data",
        &p("data/test.csv"),
        "--out",
        &p("a/detect-again"),
    ]);
    if !ok {
        return outcome(false, "a CLI invocation failed");
    }
    let read = |rel: &str| std::fs::read(Path::new(d).join(rel)).unwrap();
    let ckpt = read("a/model.ckpt") == read("b/model.ckpt");
    let trace = read("a/detect/trace.csv") == read("b/detect/trace.csv");
    let rerun = read("a/detect/trace.csv") == read("a/detect-again/trace.csv");
    outcome(
        ckpt && trace && rerun,
        format!(
            "checkpoints identical {ckpt} ({} bytes); traces identical across trainings {trace}, across detect reruns {rerun}",
            read("a/model.ckpt").len()
        ),
    )
}

fn main() {
    let mut all_pass = true;
    let mut report = |id: usize, name: &str, o: Outcome| {
        all_pass &= o.pass;
        println!(
            "{} criterion {id} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(1, "structural invariants", structural_invariants());
    report(2, "gradient correctness", gradient_correctness());
    report(3, "POT fidelity", pot_fidelity());
    report(4, "formula reproduction", formula_reproduction());

    let data = synthesize_with(&SynthSpec::default()).expect("default synthetic spec is valid");
    let config = Config::default();
    let floor = sanity_floor(&data);
    let full = train_and_score(&data, &config);
    report(5, "desk-scale end-to-end", desk_scale(&full, floor));
    report(
        6,
        "ablation direction",
        ablation_direction(&data, &config, full.report.auc.unwrap_or(0.0)),
    );
    report(7, "interpretation", interpretation(&full.state));
    report(8, "determinism", determinism());
    if !all_pass {
        std::process::exit(1);
    }
}
