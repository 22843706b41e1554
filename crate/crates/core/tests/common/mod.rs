//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance suite. Each check returns the largest relative error found.
#![allow(dead_code)]

use mmad::config::Config;
use mmad::graph::GraphTopology;
use mmad::heads::{
    draw_noise, predict_backward, predict_next, prediction_loss, reconstruction_loss, vae_backward, vae_forward,
    PredictorParams, VaeConfig, VaeParams,
};
use mmad::mgat::{mgat_backward, mgat_forward_batch, MgatConfig, MgatParams};
use mmad::model::{build_topology, gradient_check, Batch, GradCheck, ModelParams};
use mmad::nn::Params;
use mmad::temporal::{temporal_backward, temporal_forward, Pooling, TemporalConfig, TemporalParams};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Central differences over every entry of every tensor of `P`.
pub fn params_error<P: Params + Clone>(params: &P, analytic: &P, mut loss: impl FnMut(&P) -> f64) -> f64 {
    let mut grads = Vec::new();
    analytic.visit("", &mut |_, a| grads.push(a.clone()));
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let bump = |delta: f64, p: &mut P| {
                let mut t = 0;
                p.visit_mut(&mut |a| {
                    if t == ti {
                        a.as_slice_mut().unwrap()[idx] += delta;
                    }
                    t += 1;
                });
            };
            bump(EPS, &mut probe);
            let up = loss(&probe);
            bump(-2.0 * EPS, &mut probe);
            let down = loss(&probe);
            bump(EPS, &mut probe);
            worst = worst.max(rel_error(g.as_slice().unwrap()[idx], (up - down) / (2.0 * EPS)));
        }
    }
    worst
}

/// Central differences over every entry of an input matrix.
pub fn input_error(x: &Array2<f64>, analytic: &Array2<f64>, mut loss: impl FnMut(&Array2<f64>) -> f64) -> f64 {
    let analytic = analytic.as_standard_layout();
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let mut up = x.clone();
        up.as_slice_mut().unwrap()[idx] += EPS;
        let mut down = x.clone();
        down.as_slice_mut().unwrap()[idx] -= EPS;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * EPS);
        worst = worst.max(rel_error(analytic.as_slice().unwrap()[idx], numeric));
    }
    worst
}

/// Graph attention stack (N=5, w=8, d=4), parameters and embeddings,
/// topology held fixed.
pub fn mgat_error(modal: bool, attention: bool, layers: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11 + layers as u64);
    let cfg = MgatConfig {
        window: 8,
        embed_dim: 4,
        heads: 2,
        layers,
        lift_channels: 2,
        time_channels: 4,
        relation_hidden: 4,
        modal,
        attention,
    };
    let n = 5;
    let modality = [1, 1, 2, 2, 3];
    let params = MgatParams::new(cfg, &mut rng).unwrap();
    let emb = random(n, 4, &mut rng);
    let topo = GraphTopology::build(emb.view(), &modality, 3).unwrap();
    let x = Array3::from_shape_simple_fn((2, n, 8), || rng.random_range(-1.0..1.0));
    let (out, cache) = mgat_forward_batch(&params, emb.view(), &topo, x.view(), true).unwrap();
    let rt = random(out.timewise.nrows(), out.timewise.ncols(), &mut rng);
    let rs = random(out.summary.nrows(), out.summary.ncols(), &mut rng);
    let objective = |p: &MgatParams, e: &Array2<f64>| {
        let (o, _) = mgat_forward_batch(p, e.view(), &topo, x.view(), true).unwrap();
        (&o.timewise * &rt).sum() + (&o.summary * &rs).sum()
    };
    let mut grad = params.zeros_like();
    let mut d_emb = Array2::zeros(emb.raw_dim());
    mgat_backward(&params, emb.view(), &cache, &rt, Some(&rs), &mut grad, &mut d_emb);
    let p_err = params_error(&params, &grad, |p| objective(p, &emb));
    let e_err = input_error(&emb, &d_emb, |e| objective(&params, e));
    p_err.max(e_err)
}

/// Convolution stack and pooling (N=4, w=8), parameters and input.
pub fn temporal_error(pooling: Pooling, layers: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = TemporalConfig {
        window: 8,
        in_channels: 3,
        out_channels: 4,
        kernel: 3,
        layers,
        pooling,
        enabled: true,
    };
    let params = TemporalParams::new(cfg, &mut rng).unwrap();
    let (series, w) = (4, 8);
    let x = random(series * w, 3, &mut rng);
    let r = random(series, 4, &mut rng);
    let objective = |p: &TemporalParams, x: &Array2<f64>| (&temporal_forward(p, x, series, w).unwrap().0 * &r).sum();
    let (_, cache) = temporal_forward(&params, &x, series, w).unwrap();
    let mut grad = params.zeros_like();
    let dx = temporal_backward(&params, &cache, &r, &mut grad);
    params_error(&params, &grad, |p| objective(p, &x)).max(input_error(&x, &dx, |x| objective(&params, x)))
}

/// Reconstruction head (with annealed KL) and forecaster, parameters and
/// inputs.
pub fn heads_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (bsz, n, f, d) = (3, 4, 5, 2);
    let vae = VaeParams::new(
        VaeConfig {
            n_series: n,
            input_dim: n * f,
            hidden: 6,
            latent: 3,
            logvar_min: -6.0,
            logvar_max: 2.0,
        },
        &mut rng,
    )
    .unwrap();
    let feats = random(bsz, n * f, &mut rng);
    let target = Array2::from_shape_simple_fn((bsz, n), || rng.random_range(0.0..1.0));
    let noise = draw_noise(&mut rng, bsz, 2, 3);
    let rec = |q: &VaeParams, x: &Array2<f64>| {
        let (o, _) = vae_forward(q, x.view(), target.view(), noise.view()).unwrap();
        reconstruction_loss(&o.terms, 0.6)
    };
    let (_, cache) = vae_forward(&vae, feats.view(), target.view(), noise.view()).unwrap();
    let mut g_vae = vae.zeros_like();
    let dx = vae_backward(&vae, &cache, 1.0, 0.6, &mut g_vae);
    let vae_err = params_error(&vae, &g_vae, |q| rec(q, &feats)).max(input_error(&feats, &dx, |x| rec(&vae, x)));

    let pred = PredictorParams::new(f, d, 6, &mut rng);
    let node_feats = random(bsz * n, f, &mut rng);
    let emb = random(n, d, &mut rng);
    let has = [true, false, true];
    let fc = |q: &PredictorParams, x: &Array2<f64>, e: &Array2<f64>| {
        let (y, _) = predict_next(q, x.view(), e.view()).unwrap();
        prediction_loss(y.view(), target.view(), &has).0
    };
    let (y, pc) = predict_next(&pred, node_feats.view(), emb.view()).unwrap();
    let (_, dy) = prediction_loss(y.view(), target.view(), &has);
    let mut g_pred = pred.zeros_like();
    let (d_feat, d_emb) = predict_backward(&pred, &pc, &dy, &mut g_pred);
    let pred_err = params_error(&pred, &g_pred, |q| fc(q, &node_feats, &emb))
        .max(input_error(&node_feats, &d_feat, |x| fc(&pred, x, &emb)))
        .max(input_error(&emb, &d_emb, |e| fc(&pred, &node_feats, e)));
    vae_err.max(pred_err)
}

/// Joint loss of the full model on a tiny instance (N=6, w=8, d=4, z=4),
/// checked on 1% of the parameters.
pub fn end_to_end() -> GradCheck {
    let cfg = Config {
        window: 8,
        embed_dim: 4,
        topk: 3,
        heads: 2,
        conv_kernel: 3,
        latent_dim: 4,
        lift_channels: 3,
        time_channels: 4,
        conv_channels: 4,
        relation_hidden: 5,
        vae_hidden: 8,
        predictor_hidden: 8,
        ..Config::default()
    };
    let modality = vec![1, 1, 2, 2, 3, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = ModelParams::new(&cfg, 6, &mut rng).unwrap();
    let topo = build_topology(params.embedding.view(), &modality, &cfg).unwrap();
    let values = Array2::from_shape_fn((6, 30), |(i, t)| ((i as f64 + 1.0) * t as f64 * 0.17).sin() * 0.5 + 0.5);
    let batch = Batch::gather(values.view(), 8, &[8, 15, 22, 30]).unwrap();
    let noise = draw_noise(&mut rng, 4, 2, 4);
    gradient_check(&params, &topo, &batch, noise.view(), 0.5, 0.6, 0.01, 1e-4, &mut rng).unwrap()
}
