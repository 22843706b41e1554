//! Reconstruction (VAE) and forecasting (MLP) heads with their losses.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward_inplace, relu_inplace, Linear, Mlp, MlpCache, Params};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub n_series: usize,
    /// Flattened width of the per-window feature input.
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub config: VaeConfig,
    pub enc_hidden: Linear,
    /// Emits `[μ_z ‖ log σ_z]`.
    pub enc_out: Linear,
    pub dec_hidden: Linear,
    /// Emits `[μ_x ‖ log σ²_x]` per series.
    pub dec_out: Linear,
}

impl VaeParams {
    pub fn new(config: VaeConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.latent == 0 || config.hidden == 0 || config.n_series == 0 {
            return Err(Error::Config("VAE widths must be positive".into()));
        }
        Ok(VaeParams {
            enc_hidden: Linear::new(config.input_dim, config.hidden, rng),
            enc_out: Linear::new(config.hidden, 2 * config.latent, rng),
            dec_hidden: Linear::new(config.latent, config.hidden, rng),
            dec_out: Linear::new(config.hidden, 2 * config.n_series, rng),
            config,
        })
    }
}

impl Params for VaeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        self.enc_hidden.visit(&join(prefix, "enc_hidden"), f);
        self.enc_out.visit(&join(prefix, "enc_out"), f);
        self.dec_hidden.visit(&join(prefix, "dec_hidden"), f);
        self.dec_out.visit(&join(prefix, "dec_out"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        self.enc_hidden.visit_mut(f);
        self.enc_out.visit_mut(f);
        self.dec_hidden.visit_mut(f);
        self.dec_out.visit_mut(f);
    }
}

/// Standard-normal draws shaped `B × samples × latent`.
pub fn draw_noise(rng: &mut impl Rng, batch: usize, samples: usize, latent: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((batch, samples, latent), || StandardNormal.sample(rng))
}

/// Per-window terms of the evidence lower bound plus reconstruction
/// probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// `-E_q[log p(x|z)]`, Monte-Carlo mean over samples, one per window.
    pub nll: Vec<f64>,
    /// `KL(q(z|x) ‖ N(0, I))`, one per window.
    pub kl: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VaeOutput {
    /// Reconstruction probability `p_i ∈ (0, 1]`, `B × N`.
    pub probability: Array2<f64>,
    /// Decoder means averaged over samples, `B × N`.
    pub mean: Array2<f64>,
    pub terms: ElboTerms,
}

#[derive(Debug, Clone)]
pub struct VaeCache {
    input: Array2<f64>,
    enc_h: Array2<f64>,
    mu_z: Array2<f64>,
    log_sigma_z: Array2<f64>,
    noise: Array3<f64>,
    z: Array2<f64>,
    dec_h: Array2<f64>,
    mu_x: Array2<f64>,
    raw_logvar: Array2<f64>,
    logvar: Array2<f64>,
    target: Array2<f64>,
}

/// Gaussian reconstruction kernel `exp(-e² / 2σ²)`: the density divided
/// by its own peak, hence in `(0, 1]`. Floored at the smallest normal
/// float so far-off reconstructions stay strictly positive.
pub fn reconstruction_kernel(error: f64, variance: f64) -> f64 {
    (-(error * error) / (2.0 * variance)).exp().max(f64::MIN_POSITIVE)
}

/// Encodes `features` (`B × input_dim`), decodes one latent per noise draw
/// and scores `target` (`B × N`, the last observation of each window).
pub fn vae_forward(
    params: &VaeParams,
    features: ArrayView2<f64>,
    target: ArrayView2<f64>,
    noise: ArrayView3<f64>,
) -> Result<(VaeOutput, VaeCache)> {
    let cfg = &params.config;
    let (bsz, samples, latent) = noise.dim();
    if features.nrows() != bsz || target.nrows() != bsz || target.ncols() != cfg.n_series || latent != cfg.latent {
        return Err(Error::Shape(
            "VAE inputs disagree on batch, series or latent width".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::Config("at least one latent sample is required".into()));
    }
    let mut enc_h = params.enc_hidden.forward(features);
    relu_inplace(&mut enc_h);
    let enc = params.enc_out.forward(enc_h.view());
    if enc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("encoder produced a non-finite value".into()));
    }
    let mu_z = enc.slice(s![.., ..latent]).to_owned();
    let log_sigma_z = enc.slice(s![.., latent..]).to_owned();

    let mut z = Array2::zeros((bsz * samples, latent));
    for b in 0..bsz {
        for sm in 0..samples {
            for k in 0..latent {
                z[[b * samples + sm, k]] = mu_z[[b, k]] + log_sigma_z[[b, k]].exp() * noise[[b, sm, k]];
            }
        }
    }
    let mut dec_h = params.dec_hidden.forward(z.view());
    relu_inplace(&mut dec_h);
    let dec = params.dec_out.forward(dec_h.view());
    let n = cfg.n_series;
    let mu_x = dec.slice(s![.., ..n]).to_owned();
    let raw_logvar = dec.slice(s![.., n..]).to_owned();
    let logvar = raw_logvar.mapv(|v| v.clamp(cfg.logvar_min, cfg.logvar_max));

    let mut probability = Array2::zeros((bsz, n));
    let mut mean = Array2::zeros((bsz, n));
    let mut nll = vec![0.0; bsz];
    let mut kl = vec![0.0; bsz];
    let inv_s = 1.0 / samples as f64;
    for b in 0..bsz {
        for sm in 0..samples {
            let r = b * samples + sm;
            let mut ll = 0.0;
            for i in 0..n {
                let lv = logvar[[r, i]];
                let var = lv.exp();
                let e = target[[b, i]] - mu_x[[r, i]];
                ll += -HALF_LN_2PI - 0.5 * lv - e * e / (2.0 * var);
                probability[[b, i]] += inv_s * reconstruction_kernel(e, var);
                mean[[b, i]] += inv_s * mu_x[[r, i]];
            }
            nll[b] -= inv_s * ll;
        }
        for k in 0..latent {
            let (m, ls) = (mu_z[[b, k]], log_sigma_z[[b, k]]);
            kl[b] += 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls);
        }
    }
    let out = VaeOutput {
        probability,
        mean,
        terms: ElboTerms { nll, kl },
    };
    let cache = VaeCache {
        input: features.to_owned(),
        enc_h,
        mu_z,
        log_sigma_z,
        noise: noise.to_owned(),
        z,
        dec_h,
        mu_x,
        raw_logvar,
        logvar,
        target: target.to_owned(),
    };
    Ok((out, cache))
}

/// Negative ELBO averaged over windows, with the KL term weighted by
/// `kl_weight` (1 for the plain bound).
pub fn reconstruction_loss(terms: &ElboTerms, kl_weight: f64) -> f64 {
    let b = terms.nll.len().max(1) as f64;
    terms
        .nll
        .iter()
        .zip(&terms.kl)
        .map(|(n, k)| n + kl_weight * k)
        .sum::<f64>()
        / b
}

/// Backward of `scale · reconstruction_loss(terms, kl_weight)`; accumulates
/// into `grad` and returns `dL/d features`.
pub fn vae_backward(
    params: &VaeParams,
    cache: &VaeCache,
    scale: f64,
    kl_weight: f64,
    grad: &mut VaeParams,
) -> Array2<f64> {
    let cfg = &params.config;
    let (bsz, samples, latent) = cache.noise.dim();
    let n = cfg.n_series;
    let per = scale / (bsz as f64 * samples as f64);

    let mut d_dec = Array2::zeros((bsz * samples, 2 * n));
    for b in 0..bsz {
        for sm in 0..samples {
            let r = b * samples + sm;
            for i in 0..n {
                let lv = cache.logvar[[r, i]];
                let inv_var = (-lv).exp();
                let e = cache.target[[b, i]] - cache.mu_x[[r, i]];
                // loss term: 0.5 lv + e²/(2σ²)
                d_dec[[r, i]] = -per * e * inv_var;
                let raw = cache.raw_logvar[[r, i]];
                if raw > cfg.logvar_min && raw < cfg.logvar_max {
                    d_dec[[r, n + i]] = per * (0.5 - 0.5 * e * e * inv_var);
                }
            }
        }
    }
    let mut d_dec_h = params
        .dec_out
        .backward(cache.dec_h.view(), d_dec.view(), &mut grad.dec_out);
    relu_backward_inplace(&mut d_dec_h, &cache.dec_h);
    let dz = params
        .dec_hidden
        .backward(cache.z.view(), d_dec_h.view(), &mut grad.dec_hidden);

    let kl_scale = scale * kl_weight / bsz as f64;
    let mut d_enc = Array2::zeros((bsz, 2 * latent));
    for b in 0..bsz {
        for k in 0..latent {
            let (m, ls) = (cache.mu_z[[b, k]], cache.log_sigma_z[[b, k]]);
            let sigma = ls.exp();
            let mut dm = kl_scale * m;
            let mut dls = kl_scale * (sigma * sigma - 1.0);
            for sm in 0..samples {
                let g = dz[[b * samples + sm, k]];
                dm += g;
                dls += g * cache.noise[[b, sm, k]] * sigma;
            }
            d_enc[[b, k]] = dm;
            d_enc[[b, latent + k]] = dls;
        }
    }
    let mut d_enc_h = params
        .enc_out
        .backward(cache.enc_h.view(), d_enc.view(), &mut grad.enc_out);
    relu_backward_inplace(&mut d_enc_h, &cache.enc_h);
    params
        .enc_hidden
        .backward(cache.input.view(), d_enc_h.view(), &mut grad.enc_hidden)
}

/// Shared per-node forecaster over `[features_i ‖ v_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub mlp: Mlp,
}

impl PredictorParams {
    /// Two hidden ReLU layers of width `hidden`.
    pub fn new(feature_dim: usize, embed_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        PredictorParams {
            mlp: Mlp::new(&[feature_dim + embed_dim, hidden, hidden, 1], rng),
        }
    }
}

impl Params for PredictorParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        self.mlp.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct PredictorCache {
    mlp: MlpCache,
    feature_dim: usize,
    batch: usize,
    n: usize,
}

/// Forecast of the next observation, `B × N`, from node features
/// (`(B·N) × F`) and embeddings (`N × d`).
pub fn predict_next(
    params: &PredictorParams,
    features: ArrayView2<f64>,
    emb: ArrayView2<f64>,
) -> Result<(Array2<f64>, PredictorCache)> {
    let n = emb.nrows();
    if n == 0 || !features.nrows().is_multiple_of(n) {
        return Err(Error::Shape(format!(
            "{} feature rows for {n} series",
            features.nrows()
        )));
    }
    let bsz = features.nrows() / n;
    let f = features.ncols();
    let d = emb.ncols();
    let mut input = Array2::zeros((bsz * n, f + d));
    input.slice_mut(s![.., ..f]).assign(&features);
    for b in 0..bsz {
        input.slice_mut(s![b * n..(b + 1) * n, f..]).assign(&emb);
    }
    let (out, mlp) = params.mlp.forward(input.view());
    let forecast = out
        .into_shape_with_order((bsz, n))
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((
        forecast,
        PredictorCache {
            mlp,
            feature_dim: f,
            batch: bsz,
            n,
        },
    ))
}

/// Returns `(dL/d features, dL/d embeddings)`.
pub fn predict_backward(
    params: &PredictorParams,
    cache: &PredictorCache,
    d_forecast: &Array2<f64>,
    grad: &mut PredictorParams,
) -> (Array2<f64>, Array2<f64>) {
    let dy = d_forecast
        .clone()
        .into_shape_with_order((cache.batch * cache.n, 1))
        .expect("forecast grad matches batch");
    let d_in = params.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
    let f = cache.feature_dim;
    let d_feat = d_in.slice(s![.., ..f]).to_owned();
    let mut d_emb = Array2::zeros((cache.n, d_in.ncols() - f));
    for b in 0..cache.batch {
        d_emb += &d_in.slice(s![b * cache.n..(b + 1) * cache.n, f..]);
    }
    (d_feat, d_emb)
}

/// Mean over windows with a known next value of the root-sum-square
/// forecast error. Returns the loss and `dL/d forecast` (zero rows for
/// excluded windows).
pub fn prediction_loss(forecast: ArrayView2<f64>, target: ArrayView2<f64>, has_target: &[bool]) -> (f64, Array2<f64>) {
    let valid = has_target.iter().filter(|&&v| v).count();
    let mut grad = Array2::zeros(forecast.raw_dim());
    if valid == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (b, _) in has_target.iter().enumerate().filter(|(_, &v)| v) {
        let diff = &target.row(b) - &forecast.row(b);
        let norm = diff.dot(&diff).sqrt();
        total += norm;
        if norm > 0.0 {
            grad.row_mut(b).assign(&diff.mapv(|e| -e / (norm * valid as f64)));
        }
    }
    (total / valid as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vae(n: usize, input: usize, latent: usize) -> VaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        VaeParams::new(
            VaeConfig {
                n_series: n,
                input_dim: input,
                hidden: 6,
                latent,
                logvar_min: -6.0,
                logvar_max: 2.0,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(reconstruction_kernel(0.0, 0.3), 1.0);
        assert!((reconstruction_kernel(0.5, 0.25) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((reconstruction_kernel(2.0, 4.0) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn decoder_mean_on_target_gives_unit_probability() {
        let mut p = vae(2, 3, 2);
        p.dec_out.weight.fill(0.0);
        p.dec_out.bias = array![[0.4, -0.1, 0.5, 1.0]];
        let x = array![[0.1, 0.2, 0.3]];
        let target = array![[0.4, -0.1]];
        let noise = Array3::zeros((1, 3, 2));
        let (out, _) = vae_forward(&p, x.view(), target.view(), noise.view()).unwrap();
        assert_eq!(out.probability, array![[1.0, 1.0]]);
    }

    #[test]
    fn unit_posterior_has_zero_kl_and_closed_form_nll() {
        let mut p = vae(3, 2, 2);
        p.enc_out.weight.fill(0.0);
        p.enc_out.bias.fill(0.0);
        p.dec_out.weight.fill(0.0);
        p.dec_out.bias = array![[0.2, 0.3, 0.4, 0.0, 0.0, 0.0]];
        let x = array![[0.5, -0.5]];
        let target = array![[0.2, 0.3, 0.4]];
        let noise = Array3::zeros((1, 1, 2));
        let (out, _) = vae_forward(&p, x.view(), target.view(), noise.view()).unwrap();
        assert_eq!(out.terms.kl[0], 0.0);
        let expected = 3.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((reconstruction_loss(&out.terms, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn larger_error_raises_loss() {
        let mut p = vae(1, 2, 1);
        p.dec_out.weight.fill(0.0);
        p.dec_out.bias = array![[0.0, 0.0]];
        let x = array![[0.5, -0.5]];
        let noise = Array3::zeros((1, 1, 1));
        let loss = |e: f64| {
            let t = array![[e]];
            let (o, _) = vae_forward(&p, x.view(), t.view(), noise.view()).unwrap();
            (reconstruction_loss(&o.terms, 1.0), o.terms.kl[0])
        };
        let (a, ka) = loss(0.3);
        let (b, _) = loss(0.6);
        assert!(b > a);
        assert!(ka >= 0.0);
    }

    #[test]
    fn forecast_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PredictorParams::new(3, 2, 4, &mut rng);
        let feats = array![[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [0.9, 0.1, 0.0]];
        let emb = array![[0.5, 0.5], [0.5, 0.5], [0.1, 0.7]];
        let (y, _) = predict_next(&p, feats.view(), emb.view()).unwrap();
        assert_eq!(y[[0, 0]], y[[0, 1]]);
        p.mlp.visit_mut(&mut |a| a.fill(0.0));
        let (y, _) = predict_next(&p, feats.view(), emb.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_loss_examples() {
        let t = array![[1.0, 2.0]];
        assert_eq!(prediction_loss(t.view(), t.view(), &[true]).0, 0.0);
        let f = array![[0.0]];
        let y = array![[0.3]];
        assert!((prediction_loss(f.view(), y.view(), &[true]).0 - 0.3).abs() < 1e-15);
        let f = array![[0.0, 0.0], [9.0, 9.0]];
        let y = array![[3.0, 4.0], [0.0, 0.0]];
        let (l, g) = prediction_loss(f.view(), y.view(), &[true, false]);
        assert_eq!(l, 5.0);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vae_gradient_matches_finite_differences() {
        let p = vae(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((2, 4), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((2, 3), || rng.random_range(0.0..1.0));
        let noise = draw_noise(&mut rng, 2, 2, 2);
        let loss = |q: &VaeParams, x: &Array2<f64>| {
            let (o, _) = vae_forward(q, x.view(), target.view(), noise.view()).unwrap();
            reconstruction_loss(&o.terms, 0.7)
        };
        let (_, cache) = vae_forward(&p, x.view(), target.view(), noise.view()).unwrap();
        let mut grad = p.zeros_like();
        let dx = vae_backward(&p, &cache, 1.0, 0.7, &mut grad);
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..4 {
                let mut up = x.clone();
                up[[r, c]] += h;
                let mut dn = x.clone();
                dn[[r, c]] -= h;
                let num = (loss(&p, &up) - loss(&p, &dn)) / (2.0 * h);
                assert!(
                    (num - dx[[r, c]]).abs() < 1e-6 * (1.0 + num.abs()),
                    "{num} vs {}",
                    dx[[r, c]]
                );
            }
        }
        let mut analytic = Vec::new();
        grad.visit("", &mut |_, g| analytic.extend(g.iter().copied()));
        let mut probe = p.clone();
        for idx in (0..analytic.len()).step_by(3) {
            let bump = |q: &mut VaeParams, delta: f64| {
                let mut c = 0;
                q.visit_mut(&mut |a| {
                    for v in a.iter_mut() {
                        if c == idx {
                            *v += delta;
                        }
                        c += 1;
                    }
                });
            };
            bump(&mut probe, h);
            let up = loss(&probe, &x);
            bump(&mut probe, -2.0 * h);
            let dn = loss(&probe, &x);
            bump(&mut probe, h);
            let num = (up - dn) / (2.0 * h);
            assert!(
                (num - analytic[idx]).abs() < 1e-6 * (1.0 + num.abs()),
                "param {idx}: {num} vs {}",
                analytic[idx]
            );
        }
    }
}
