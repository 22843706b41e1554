//! Full detector: embeddings, graph attention, temporal convolution and the
//! two heads, with a batched joint-loss forward/backward.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::{GraphTopology, SeriesEmbedding};
use crate::heads::{
    predict_backward, predict_next, prediction_loss, reconstruction_loss, vae_backward, vae_forward, PredictorParams,
    VaeConfig, VaeOutput, VaeParams,
};
use crate::mgat::{mgat_backward, mgat_forward_batch, MgatConfig, MgatParams};
use crate::nn::{join, Params};
use crate::temporal::{temporal_backward, temporal_forward, TemporalConfig, TemporalParams};

pub const LOGVAR_RANGE: (f64, f64) = (-6.0, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Learned series embeddings, `N × d`.
    pub embedding: Array2<f64>,
    pub mgat: MgatParams,
    pub temporal: TemporalParams,
    pub vae: VaeParams,
    pub predictor: PredictorParams,
}

pub fn mgat_config(cfg: &Config) -> MgatConfig {
    MgatConfig {
        window: cfg.window,
        embed_dim: cfg.embed_dim,
        heads: cfg.heads,
        layers: cfg.gat_layers,
        lift_channels: cfg.lift_channels,
        time_channels: cfg.time_channels,
        relation_hidden: cfg.relation_hidden,
        modal: !cfg.ablation.disable_modal,
        attention: !cfg.ablation.disable_attention,
    }
}

impl ModelParams {
    pub fn new(cfg: &Config, n_series: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_series == 0 {
            return Err(Error::Data("no series to model".into()));
        }
        let embedding = SeriesEmbedding::init(n_series, cfg.embed_dim, rng).vectors;
        let mgat = MgatParams::new(mgat_config(cfg), rng)?;
        let temporal = TemporalParams::new(
            TemporalConfig {
                window: cfg.window,
                in_channels: mgat.config.output_channels(),
                out_channels: cfg.conv_channels,
                kernel: cfg.conv_kernel,
                layers: cfg.conv_layers,
                pooling: cfg.pooling,
                enabled: !cfg.ablation.disable_temporal,
            },
            rng,
        )?;
        let f = temporal.config.feature_dim();
        let vae = VaeParams::new(
            VaeConfig {
                n_series,
                input_dim: n_series * f,
                hidden: cfg.vae_hidden,
                latent: cfg.latent_dim,
                logvar_min: LOGVAR_RANGE.0,
                logvar_max: LOGVAR_RANGE.1,
            },
            rng,
        )?;
        let predictor = PredictorParams::new(f, cfg.embed_dim, cfg.predictor_hidden, rng);
        Ok(ModelParams {
            embedding,
            mgat,
            temporal,
            vae,
            predictor,
        })
    }

    pub fn n_series(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn window(&self) -> usize {
        self.mgat.config.window
    }

    pub fn feature_dim(&self) -> usize {
        self.temporal.config.feature_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.vae.config.latent
    }
}

impl Params for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        f(&join(prefix, "embedding"), &self.embedding);
        self.mgat.visit(&join(prefix, "mgat"), f);
        self.temporal.visit(&join(prefix, "temporal"), f);
        self.vae.visit(&join(prefix, "vae"), f);
        self.predictor.visit(&join(prefix, "predictor"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        f(&mut self.embedding);
        self.mgat.visit_mut(f);
        self.temporal.visit_mut(f);
        self.vae.visit_mut(f);
        self.predictor.visit_mut(f);
    }
}

/// Graph over the current embeddings. With TopK disabled every candidate
/// set is kept whole.
pub fn build_topology(emb: ArrayView2<f64>, modality: &[usize], cfg: &Config) -> Result<GraphTopology> {
    let k = if cfg.ablation.disable_topk {
        emb.nrows()
    } else {
        cfg.topk
    };
    GraphTopology::build(emb, modality, k)
}

/// A stack of windows cut from one `N × T` matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B × N × w`.
    pub x: Array3<f64>,
    /// `B × N`, the observation after each window (zeros where absent).
    pub next: Array2<f64>,
    pub has_next: Vec<bool>,
    /// Exclusive end index of each window.
    pub ends: Vec<usize>,
}

impl Batch {
    pub fn gather(values: ArrayView2<f64>, w: usize, ends: &[usize]) -> Result<Self> {
        let (n, t) = values.dim();
        let bsz = ends.len();
        let mut x = Array3::zeros((bsz, n, w));
        let mut next = Array2::zeros((bsz, n));
        let mut has_next = Vec::with_capacity(bsz);
        for (b, &end) in ends.iter().enumerate() {
            if end < w || end > t {
                return Err(Error::Shape(format!(
                    "window ending at {end} does not fit length {t} with w={w}"
                )));
            }
            x.index_axis_mut(Axis(0), b).assign(&values.slice(s![.., end - w..end]));
            if end < t {
                next.row_mut(b).assign(&values.column(end));
            }
            has_next.push(end < t);
        }
        Ok(Batch {
            x,
            next,
            has_next,
            ends: ends.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    /// Last observation of each window, `B × N`.
    pub fn last(&self) -> Array2<f64> {
        let w = self.x.dim().2;
        self.x.index_axis(Axis(2), w - 1).to_owned()
    }
}

/// Batch losses. `rec` and `joint` use the full KL term; `objective` is the
/// joint loss with the annealed KL weight, which is what the gradient follows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub pred: f64,
    pub joint: f64,
    pub objective: f64,
}

/// `γ₁·L_rec + (1 − γ₁)·L_pred`.
pub fn joint_loss(rec: f64, pred: f64, gamma1: f64) -> f64 {
    gamma1 * rec + (1.0 - gamma1) * pred
}

/// Head outputs for a batch.
#[derive(Debug, Clone)]
pub struct Inference {
    pub vae: VaeOutput,
    /// `B × N` forecast of the observation after each window.
    pub forecast: Array2<f64>,
}

fn flatten_rows(a: &Array2<f64>, rows: usize) -> Result<Array2<f64>> {
    let cols = a.len() / rows.max(1);
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Forward pass without gradients. `noise` is `B × S × latent`.
pub fn infer(
    params: &ModelParams,
    topo: &GraphTopology,
    x: ArrayView3<f64>,
    noise: ArrayView3<f64>,
) -> Result<Inference> {
    let (bsz, n, w) = x.dim();
    let emb = params.embedding.view();
    let (feat, _) = mgat_forward_batch(&params.mgat, emb, topo, x, false)?;
    let (pooled, _) = temporal_forward(&params.temporal, &feat.timewise, bsz * n, w)?;
    let vin = flatten_rows(&pooled, bsz)?;
    let last = x.index_axis(Axis(2), w - 1).to_owned();
    let (vae, _) = vae_forward(&params.vae, vin.view(), last.view(), noise)?;
    let (forecast, _) = predict_next(&params.predictor, pooled.view(), emb)?;
    Ok(Inference { vae, forecast })
}

/// Joint loss and its gradient for one batch. The topology is held fixed.
pub fn loss_and_grad(
    params: &ModelParams,
    topo: &GraphTopology,
    batch: &Batch,
    noise: ArrayView3<f64>,
    gamma1: f64,
    kl_weight: f64,
) -> Result<(LossParts, ModelParams)> {
    let (bsz, n, w) = batch.x.dim();
    let emb = params.embedding.view();
    let (feat, mcache) = mgat_forward_batch(&params.mgat, emb, topo, batch.x.view(), false)?;
    let (pooled, tcache) = temporal_forward(&params.temporal, &feat.timewise, bsz * n, w)?;
    let vin = flatten_rows(&pooled, bsz)?;
    let last = batch.last();
    let (vae_out, vcache) = vae_forward(&params.vae, vin.view(), last.view(), noise)?;
    let (forecast, pcache) = predict_next(&params.predictor, pooled.view(), emb)?;

    let rec = reconstruction_loss(&vae_out.terms, 1.0);
    let (pred, mut d_forecast) = prediction_loss(forecast.view(), batch.next.view(), &batch.has_next);
    let parts = LossParts {
        rec,
        pred,
        joint: joint_loss(rec, pred, gamma1),
        objective: joint_loss(reconstruction_loss(&vae_out.terms, kl_weight), pred, gamma1),
    };
    if !parts.objective.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss (rec {rec}, pred {pred})")));
    }

    let mut grad = params.zeros_like();
    let d_vin = vae_backward(&params.vae, &vcache, gamma1, kl_weight, &mut grad.vae);
    d_forecast.mapv_inplace(|v| v * (1.0 - gamma1));
    let (d_feat, d_emb_pred) = predict_backward(&params.predictor, &pcache, &d_forecast, &mut grad.predictor);
    let mut d_pooled = flatten_rows(&d_vin, bsz * n)?;
    d_pooled += &d_feat;
    let d_time = temporal_backward(&params.temporal, &tcache, &d_pooled, &mut grad.temporal);
    mgat_backward(
        &params.mgat,
        emb,
        &mcache,
        &d_time,
        None,
        &mut grad.mgat,
        &mut grad.embedding,
    );
    grad.embedding += &d_emb_pred;
    Ok((parts, grad))
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic gradient of the training objective with central
/// differences on a random `fraction` of entries (at least one per tensor).
/// The relative error uses `max(|a|, |n|, floor)` as denominator.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    params: &ModelParams,
    topo: &GraphTopology,
    batch: &Batch,
    noise: ArrayView3<f64>,
    gamma1: f64,
    kl_weight: f64,
    fraction: f64,
    floor: f64,
    rng: &mut impl Rng,
) -> Result<GradCheck> {
    let (_, grad) = loss_and_grad(params, topo, batch, noise, gamma1, kl_weight)?;
    let mut analytic = Vec::new();
    grad.visit("", &mut |_, a| analytic.push(a.clone()));
    let eps = 1e-5;
    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (ti, g) in analytic.iter().enumerate() {
        let len = g.len();
        let picks = ((len as f64 * fraction).ceil() as usize).clamp(1, len);
        for _ in 0..picks {
            let idx = rng.random_range(0..len);
            let eval = |probe: &mut ModelParams, delta: f64| -> Result<f64> {
                nudge(probe, ti, idx, delta);
                let l = loss_and_grad(probe, topo, batch, noise, gamma1, kl_weight)?.0.objective;
                nudge(probe, ti, idx, -delta);
                Ok(l)
            };
            let numeric = (eval(&mut probe, eps)? - eval(&mut probe, -eps)?) / (2.0 * eps);
            let a = g.as_slice().expect("owned gradients are contiguous")[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheck {
        checked,
        max_rel_error: max_rel,
    })
}

fn nudge(p: &mut ModelParams, tensor: usize, idx: usize, delta: f64) {
    let mut t = 0;
    p.visit_mut(&mut |a| {
        if t == tensor {
            a.as_slice_mut().expect("parameters are contiguous")[idx] += delta;
        }
        t += 1;
    });
}
