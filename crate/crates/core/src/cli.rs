//! Command-line surface: `train`, `detect`, `explain`, `synth` and
//! `export-graph`. Each command is a plain function so it can be driven from
//! tests as well as from the `mmad` binary.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::Config;
use crate::dataset::{
    load_dataset, load_dataset_with_modalities, synthesize_with, write_labels, write_modalities, write_values_csv,
    AnomalyInterval, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::scoring::{interpret, score_series, Interpretation, PotResult, ScoreTrace};
use crate::training::{fit, save_loss_trace, ModelState};

#[derive(Debug, Parser)]
#[command(
    name = "mmad",
    version,
    about = "Multimodal graph-attention anomaly detection for multivariate time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector and calibrate its threshold.
    Train(TrainArgs),
    /// Score a test series and flag anomalies.
    Detect(DetectArgs),
    /// Rank sensors by mean anomaly score over an interval.
    Explain(ExplainArgs),
    /// Generate a seeded synthetic multimodal dataset.
    Synth(SynthArgs),
    /// Export the learned sensor graph as an edge list.
    ExportGraph(ExportGraphArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration; every key must be present.
    #[arg(long)]
    pub config: PathBuf,
    /// Training CSV: header of series names, one row per timestamp.
    #[arg(long)]
    pub train_data: PathBuf,
    /// JSON map from series name to modality id.
    #[arg(long)]
    pub modalities: PathBuf,
    /// Output directory for `model.ckpt` and `loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    /// Modality map of the test data; defaults to the model's.
    #[arg(long)]
    pub modalities: Option<PathBuf>,
    /// CSV `timestamp_index,label`; enables `metrics.json`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output directory for `trace.csv`, `detection.json` and `metrics.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Score trace written by `detect`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Inclusive timestamp range `a:b`.
    #[arg(long)]
    pub interval: String,
    /// Output directory for `interpretation.json` and `sensor_scores.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML generator spec; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportGraphArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Edge-list CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

/// `#` comment lines naming the tool version and configuration hash.
pub fn provenance(config_hash: &str) -> Vec<String> {
    vec![format!("mmad {}", crate::VERSION), format!("config_hash {config_hash}")]
}

/// JSON envelope carrying the same provenance as the CSV headers.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    tool_version: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, config_hash: &str, body: T) -> Result<()> {
    let stamped = Stamped {
        tool_version: crate::VERSION,
        config_hash,
        body,
    };
    let mut text = serde_json::to_string_pretty(&stamped).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Detect(a) => cmd_detect(&a).map(|_| ()),
        Command::Explain(a) => cmd_explain(&a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a),
        Command::ExportGraph(a) => cmd_export_graph(&a),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<ModelState> {
    let mut config = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let train = load_dataset(&args.train_data, &args.modalities, None)?;
    ensure_dir(&args.out)?;
    let state = fit(&train, &config, &mut |e| {
        println!(
            "epoch {:>3}  l_rec {:>10.4}  l_pred {:>8.4}  l_joint {:>10.4}",
            e.epoch, e.l_rec, e.l_pred, e.l_joint
        );
    })?;
    let header = provenance(&config.hash());
    save_checkpoint(&state, &args.out.join("model.ckpt"))?;
    save_loss_trace(&state.loss_trace, &args.out.join("loss.csv"), &header)?;
    println!(
        "threshold {:e} ({:?})",
        state.threshold.threshold, state.threshold.method
    );
    Ok(state)
}

#[derive(Debug, Serialize)]
struct DetectionSummary<'a> {
    timestamps: usize,
    warmup: usize,
    detections: usize,
    pot: &'a PotResult,
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a> {
    /// Protocol of the headline numbers; point adjustment is reported
    /// alongside, never substituted.
    headline_protocol: &'static str,
    point_adjust: bool,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

pub fn cmd_detect(args: &DetectArgs) -> Result<(ScoreTrace, Option<MetricsReport>)> {
    let state = load_checkpoint(&args.model)?;
    let test = match &args.modalities {
        Some(m) => load_dataset(&args.test_data, m, args.labels.as_deref())?,
        None => {
            let map: BTreeMap<String, usize> = state
                .names
                .iter()
                .cloned()
                .zip(state.modality.iter().copied())
                .collect();
            load_dataset_with_modalities(&args.test_data, &map, args.labels.as_deref())?
        }
    };
    let trace = score_series(&state, &test)?;
    let hash = state.config.hash();
    let header = provenance(&hash);
    ensure_dir(&args.out)?;
    trace.save(&args.out.join("trace.csv"), &header)?;
    let detections = trace.detected.iter().filter(|&&d| d != 0).count();
    write_json(
        &args.out.join("detection.json"),
        &hash,
        DetectionSummary {
            timestamps: trace.len(),
            warmup: trace.warmup,
            detections,
            pot: &state.threshold,
        },
    )?;
    println!(
        "{} timestamps, {detections} flagged above {:e}",
        trace.len(),
        trace.threshold
    );
    let report = match test.labels() {
        Some(labels) => {
            let r = evaluate(&trace.score, &trace.detected, labels, trace.warmup, trace.threshold)?;
            write_json(
                &args.out.join("metrics.json"),
                &hash,
                MetricsFile {
                    headline_protocol: "raw",
                    point_adjust: false,
                    report: &r,
                },
            )?;
            match r.auc {
                Some(auc) => println!("AUC {auc:.4}"),
                None => println!("AUC undefined (single-class labels)"),
            }
            println!(
                "raw            P {:.4}  R {:.4}  F1 {:.4}",
                r.raw.precision, r.raw.recall, r.raw.f1
            );
            println!(
                "point-adjusted P {:.4}  R {:.4}  F1 {:.4}",
                r.point_adjusted.precision, r.point_adjusted.recall, r.point_adjusted.f1
            );
            Some(r)
        }
        None => None,
    };
    Ok((trace, report))
}

/// Parses `a:b` into an inclusive range.
pub fn parse_interval(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("interval `{s}` is not of the form a:b with a <= b"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<Interpretation> {
    let (a, b) = parse_interval(&args.interval)?;
    let state = load_checkpoint(&args.model)?;
    let trace = ScoreTrace::load(&args.trace, &state.names)?;
    let report = interpret(&trace, a, b)?;
    let hash = state.config.hash();
    ensure_dir(&args.out)?;
    write_json(&args.out.join("interpretation.json"), &hash, &report)?;

    let path = args.out.join("sensor_scores.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    let io = |e| Error::io(&path, e);
    for line in provenance(&hash) {
        writeln!(w, "# {line}").map_err(io)?;
    }
    writeln!(w, "t,{}", state.names.join(",")).map_err(io)?;
    for t in a..=b {
        let row: Vec<String> = trace.per_sensor.row(t).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{t},{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    println!("top-1 over {a}:{b}: {}", report.top1);
    for s in &report.ranking {
        println!("  {:<12} {:.5}", s.series, s.mean_score);
    }
    Ok(report)
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    spec: &'a SynthSpec,
    anomalies: &'a [AnomalyInterval],
}

fn spec_hash(spec: &SynthSpec) -> String {
    let json = serde_json::to_string(spec).expect("spec serializes");
    Sha256::digest(json.as_bytes())[..6]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = synthesize_with(&spec)?;
    let dir = &args.out_dir;
    ensure_dir(dir)?;
    let hash = spec_hash(&spec);
    let header = provenance(&hash);
    write_values_csv(&data.train, &dir.join("train.csv"), &header)?;
    write_values_csv(&data.test, &dir.join("test.csv"), &header)?;
    write_labels(data.test.labels().unwrap_or(&[]), &dir.join("labels.csv"), &header)?;
    write_modalities(&data.train, &dir.join("modalities.json"))?;
    write_json(
        &dir.join("manifest.json"),
        &hash,
        SynthManifest {
            spec: &spec,
            anomalies: &data.anomalies,
        },
    )?;
    info!("wrote synthetic dataset to {}", dir.display());
    println!(
        "{} series, {} train + {} test timestamps, {} anomaly intervals -> {}",
        spec.n_series,
        spec.train_len,
        spec.test_len,
        data.anomalies.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_export_graph(args: &ExportGraphArgs) -> Result<()> {
    let state = load_checkpoint(&args.model)?;
    let path = &args.out;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    for line in provenance(&state.config.hash()) {
        writeln!(w, "# {line}").map_err(io)?;
    }
    state.topology.write_edge_list(&state.names, &mut w).map_err(io)?;
    w.flush().map_err(io)?;
    let t = &state.topology;
    println!(
        "{} edges (topk {}, intra {}, inter {}) -> {}",
        t.topk.edge_count() + t.intra.edge_count() + t.inter.edge_count(),
        t.topk.edge_count(),
        t.intra.edge_count(),
        t.inter.edge_count(),
        path.display()
    );
    Ok(())
}
