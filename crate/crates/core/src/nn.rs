//! Small dense-layer toolkit with explicit backward passes.
//!
//! Every trainable tensor is an `Array2<f64>`; biases are stored as `1 × n`
//! rows so that optimizers and gradient checks can treat all parameters
//! uniformly through [`Params`].

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Uniform visitation over trainable tensors in a fixed, deterministic order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    /// Same structure, every entry zero. Used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |p| p.fill(0.0));
        z
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, p| ok &= p.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Applies `f(param, other)` pairwise over two structurally identical trees.
pub fn zip_params<P: Params>(target: &mut P, other: &P, mut f: impl FnMut(&mut Array2<f64>, &Array2<f64>)) {
    let mut others = Vec::new();
    other.visit("", &mut |_, p| others.push(p));
    let mut idx = 0;
    target.visit_mut(&mut |p| {
        f(p, others[idx]);
        idx += 1;
    });
    debug_assert_eq!(idx, others.len());
}

/// Sum of squares over all entries.
pub fn squared_norm<P: Params>(p: &P) -> f64 {
    let mut s = 0.0;
    p.visit("", &mut |_, a| s += a.iter().map(|v| v * v).sum::<f64>());
    s
}

pub fn scale_params<P: Params>(p: &mut P, factor: f64) {
    p.visit_mut(&mut |a| a.mapv_inplace(|v| v * factor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Affine map `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: uniform_init(input, output, input, rng),
            bias: uniform_init(1, output, input, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Stack of `Linear` layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations retained by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(h.view());
            if k + 1 < self.layers.len() {
                relu_inplace(&mut y);
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpCache { inputs })
    }

    pub fn backward(&self, cache: &MlpCache, dy: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy;
        for k in (0..self.layers.len()).rev() {
            let x = &cache.inputs[k];
            d = self.layers[k].backward(x.view(), d.view(), &mut grad.layers[k]);
            if k > 0 {
                // inputs[k] is the ReLU output of layer k-1
                relu_backward_inplace(&mut d, &cache.inputs[k]);
            }
        }
        d
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{k}")), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

pub fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output `out` is not positive.
pub fn relu_backward_inplace(grad: &mut Array2<f64>, out: &Array2<f64>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over a slice, in place. Empty slices are left untouched.
pub fn softmax_inplace(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Backward of softmax: given probabilities `p` and `dL/dp`, returns `dL/dlogits`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(a, b)| a * (b - dot)).collect()
}
