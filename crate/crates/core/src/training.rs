//! Joint optimization of the detector and calibration of its threshold.

use std::io::Write;
use std::path::Path;

use log::info;
use ndarray::{concatenate, s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{split_validation, window_ends, NormStats, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::heads::draw_noise;
use crate::model::{build_topology, loss_and_grad, Batch, LossParts, ModelParams};
use crate::nn::{scale_params, squared_norm, Params};
use crate::scoring::{pot_threshold, score_normalized, PotMethod, PotResult};

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_pred: f64,
    pub l_joint: f64,
}

/// Everything needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub names: Vec<String>,
    pub modality: Vec<usize>,
    pub config: Config,
    pub norm: NormStats,
    pub params: ModelParams,
    /// Graph built from the final embeddings.
    pub topology: GraphTopology,
    pub threshold: PotResult,
    pub loss_trace: Vec<EpochLoss>,
}

impl ModelState {
    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.threshold.threshold.is_finite()
    }
}

/// Writes the loss trace as CSV `epoch,l_rec,l_pred,l_joint`.
pub fn write_loss_trace(trace: &[EpochLoss], out: &mut impl Write, header: &[String]) -> std::io::Result<()> {
    for line in header {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "epoch,l_rec,l_pred,l_joint")?;
    for e in trace {
        writeln!(out, "{},{:e},{:e},{:e}", e.epoch, e.l_rec, e.l_pred, e.l_joint)?;
    }
    Ok(())
}

pub fn save_loss_trace(trace: &[EpochLoss], path: &Path, header: &[String]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_loss_trace(trace, &mut w, header)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Adam with bias correction. Moments are kept flat, in visitation order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let n = params.param_count();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let step_size = lr / c1;
        let inv_sqrt_c2 = 1.0 / c2.sqrt();
        let mut grads = Vec::new();
        grad.visit("", &mut |_, g| grads.push(g));
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        let mut idx = 0;
        params.visit_mut(&mut |p| {
            let g = grads[idx];
            idx += 1;
            let len = p.len();
            let ms = &mut m[offset..offset + len];
            let vs = &mut v[offset..offset + len];
            offset += len;
            let ps = p.as_slice_mut().expect("parameters are contiguous");
            let gs = g.as_slice().expect("gradients are contiguous");
            for (((pk, &gk), mk), vk) in ps.iter_mut().zip(gs).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                *pk -= step_size * *mk / (vk.sqrt() * inv_sqrt_c2 + eps);
            }
        });
    }
}

/// KL weight, rising linearly to 1 over the warm-up epochs.
pub fn kl_weight(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        ((epoch + 1) as f64 / warmup_epochs as f64).min(1.0)
    }
}

/// Rescales `grad` to global norm `max_norm` when it is larger; returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = squared_norm(grad).sqrt();
    if norm > max_norm && norm > 0.0 {
        scale_params(grad, max_norm / norm);
    }
    norm
}

/// Trains on a normalized anomaly-free split, then calibrates the detection
/// threshold on the scores of `val` (also normalized). `on_epoch` sees each
/// epoch's mean losses.
pub fn train(
    train_ds: &TimeSeriesDataset,
    val_ds: &TimeSeriesDataset,
    norm: NormStats,
    config: &Config,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<ModelState> {
    config.validate()?;
    if train_ds.names() != val_ds.names() || train_ds.modality() != val_ds.modality() {
        return Err(Error::Data("training and validation series differ".into()));
    }
    let n = train_ds.n_series();
    let w = config.window;
    let modality = train_ds.modality().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::new(config, n, &mut rng)?;
    let mut adam = Adam::new(&params, config.lr);
    let values = train_ds.values();
    let mut ends = window_ends(train_ds.len(), w, config.stride)?;
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let topo = build_topology(params.embedding.view(), &modality, config)?;
        ends.shuffle(&mut rng);
        let klw = kl_weight(epoch, config.kl_warmup_epochs);
        let mut sum = LossParts::default();
        let mut count = 0.0;
        for (bi, chunk) in ends.chunks(config.batch).enumerate() {
            let batch = Batch::gather(values.view(), w, chunk)?;
            let noise = draw_noise(&mut rng, chunk.len(), config.train_samples, config.latent_dim);
            let at = |msg: String| Error::Numeric(format!("epoch {}, batch {}: {msg}", epoch + 1, bi + 1));
            let (parts, mut grad) =
                loss_and_grad(&params, &topo, &batch, noise.view(), config.gamma1, klw).map_err(|e| match e {
                    Error::Numeric(m) => at(m),
                    other => other,
                })?;
            if !grad.is_finite() {
                return Err(at("non-finite gradient".into()));
            }
            clip_global_norm(&mut grad, config.clip_norm);
            adam.step(&mut params, &grad);
            if !params.is_finite() {
                return Err(at("parameters became non-finite".into()));
            }
            let b = chunk.len() as f64;
            sum.rec += parts.rec * b;
            sum.pred += parts.pred * b;
            sum.joint += parts.joint * b;
            count += b;
        }
        let e = EpochLoss {
            epoch: epoch + 1,
            l_rec: sum.rec / count,
            l_pred: sum.pred / count,
            l_joint: sum.joint / count,
        };
        info!(
            "epoch {:>3}: l_rec {:.5} l_pred {:.5} l_joint {:.5}",
            e.epoch, e.l_rec, e.l_pred, e.l_joint
        );
        on_epoch(&e);
        trace.push(e);
    }

    let topology = build_topology(params.embedding.view(), &modality, config)?;
    let mut state = ModelState {
        names: train_ds.names().to_vec(),
        modality,
        config: config.clone(),
        norm,
        params,
        topology,
        threshold: PotResult {
            threshold: f64::INFINITY,
            method: PotMethod::Empirical,
            init_threshold: 0.0,
            n_excess: 0,
            xi: None,
            sigma: None,
        },
        loss_trace: trace,
    };
    let val_scores = validation_scores(&state, train_ds, val_ds)?;
    state.threshold = pot_threshold(&val_scores, config.pot_q, config.pot_init_level)?;
    info!(
        "threshold {:.6} ({:?}, {} excesses over {:.6})",
        state.threshold.threshold, state.threshold.method, state.threshold.n_excess, state.threshold.init_threshold
    );
    Ok(state)
}

/// Scores of every validation timestamp, using the last `w` training
/// observations as context so that none fall in the warm-up region.
pub fn validation_scores(
    state: &ModelState,
    train_ds: &TimeSeriesDataset,
    val_ds: &TimeSeriesDataset,
) -> Result<Vec<f64>> {
    let w = state.config.window;
    let ctx = w.min(train_ds.len());
    let values = concatenate(
        Axis(1),
        &[
            train_ds.values().slice(s![.., train_ds.len() - ctx..]),
            val_ds.values().view(),
        ],
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let joined = TimeSeriesDataset::new(
        val_ds.names().to_vec(),
        values,
        val_ds.modality().to_vec(),
        None,
        val_ds.split(),
    )?;
    let trace = score_normalized(state, &joined)?;
    Ok(trace.score[w.min(trace.len())..].to_vec())
}

/// Normalizes raw training data, holds out the validation tail and trains.
pub fn fit(raw_train: &TimeSeriesDataset, config: &Config, on_epoch: &mut dyn FnMut(&EpochLoss)) -> Result<ModelState> {
    config.validate()?;
    let norm = NormStats::fit(raw_train);
    let normalized = norm.apply(raw_train, None)?;
    let (tr, val) = split_validation(&normalized, config.val_fraction)?;
    train(&tr, &val, norm, config, on_epoch)
}
