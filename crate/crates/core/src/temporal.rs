//! Temporal convolution over the time axis of M-GAT's `timewise` output.
//!
//! Each layer computes `T' = ReLU(Φ * ReLU(T))` with a 1-D kernel shared by
//! all nodes and "same" zero padding, so every layer keeps length `w`. The
//! final layer is pooled over time into one feature row per node.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward_inplace, Linear, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub window: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub layers: usize,
    pub pooling: Pooling,
    /// When false the stack is skipped and the input is pooled directly.
    pub enabled: bool,
}

impl TemporalConfig {
    pub fn feature_dim(&self) -> usize {
        if self.enabled && self.layers > 0 {
            self.out_channels
        } else {
            self.in_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalParams {
    pub config: TemporalConfig,
    /// Layer `l` maps an unfolded `kernel × C_in` patch to `C_out`.
    pub kernels: Vec<Linear>,
}

impl TemporalParams {
    pub fn new(config: TemporalConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.kernel == 0 || config.kernel > config.window {
            return Err(Error::Config(format!(
                "kernel width {} must lie in 1..={}",
                config.kernel, config.window
            )));
        }
        let layers = if config.enabled { config.layers } else { 0 };
        let kernels = (0..layers)
            .map(|l| {
                let c_in = if l == 0 {
                    config.in_channels
                } else {
                    config.out_channels
                };
                Linear::new(config.kernel * c_in, config.out_channels, rng)
            })
            .collect();
        Ok(TemporalParams { config, kernels })
    }
}

impl Params for TemporalParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        for (l, k) in self.kernels.iter().enumerate() {
            k.visit(&join(prefix, &format!("conv{l}")), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        for k in &mut self.kernels {
            k.visit_mut(f);
        }
    }
}

fn pad_left(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Series per unfolded block, keeping the patch buffer cache-sized.
const BLOCK_SERIES: usize = 16;

/// Unfolds series `s0..s0+count` of `(series × w) × C` rows into
/// `(count·w) × (kernel·C)` patches written to `cols`.
fn im2col_block(src: &[f64], c: usize, s0: usize, count: usize, w: usize, kernel: usize, cols: &mut [f64]) {
    let left = pad_left(kernel) as isize;
    for s in 0..count {
        for t in 0..w {
            let row = (s * w + t) * kernel * c;
            for k in 0..kernel {
                let tt = t as isize + k as isize - left;
                let dst = &mut cols[row + k * c..row + (k + 1) * c];
                if tt < 0 || tt >= w as isize {
                    dst.fill(0.0);
                    continue;
                }
                let from = ((s0 + s) * w + tt as usize) * c;
                dst.copy_from_slice(&src[from..from + c]);
            }
        }
    }
}

/// Adjoint of [`im2col_block`]: adds patch gradients back onto the rows of
/// series `s0..s0+count`.
fn col2im_block(dcols: &[f64], c: usize, s0: usize, count: usize, w: usize, kernel: usize, dst: &mut [f64]) {
    let left = pad_left(kernel) as isize;
    for s in 0..count {
        for t in 0..w {
            let row = (s * w + t) * kernel * c;
            for k in 0..kernel {
                let tt = t as isize + k as isize - left;
                if tt < 0 || tt >= w as isize {
                    continue;
                }
                let to = ((s0 + s) * w + tt as usize) * c;
                for (d, g) in dst[to..to + c].iter_mut().zip(&dcols[row + k * c..row + (k + 1) * c]) {
                    *d += g;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ConvCache {
    /// `ReLU` of the layer input.
    relu_in: Array2<f64>,
    output: Array2<f64>,
}

/// One convolution layer on `(series·w) × C` rows.
fn conv_layer(kernel: &Linear, input: &Array2<f64>, series: usize, w: usize) -> (Array2<f64>, ConvCache) {
    let c = input.ncols();
    let width = kernel.input_dim() / c;
    let relu_in = input.mapv(|v| v.max(0.0));
    let mut out = Array2::zeros((series * w, kernel.output_dim()));
    let src = relu_in.as_slice().expect("standard layout");
    let mut buf = vec![0.0; BLOCK_SERIES.min(series) * w * width * c];
    for s0 in (0..series).step_by(BLOCK_SERIES) {
        let count = BLOCK_SERIES.min(series - s0);
        let cols = &mut buf[..count * w * width * c];
        im2col_block(src, c, s0, count, w, width, cols);
        let cols = ArrayView2::from_shape((count * w, width * c), &*cols).expect("block shape");
        let mut rows = out.slice_mut(s![s0 * w..(s0 + count) * w, ..]);
        let dim = rows.raw_dim();
        rows.assign(&kernel.bias.broadcast(dim).expect("bias row"));
        general_mat_mul(1.0, &cols, &kernel.weight, 1.0, &mut rows);
    }
    out.mapv_inplace(|v| v.max(0.0));
    let cache = ConvCache {
        relu_in,
        output: out.clone(),
    };
    (out, cache)
}

fn conv_layer_backward(
    kernel: &Linear,
    cache: &ConvCache,
    dout: &Array2<f64>,
    series: usize,
    w: usize,
    grad: &mut Linear,
) -> Array2<f64> {
    let c = cache.relu_in.ncols();
    let width = kernel.input_dim() / c;
    let mut dpre = dout.clone();
    relu_backward_inplace(&mut dpre, &cache.output);
    grad.bias += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut din = Array2::zeros((series * w, c));
    let src = cache.relu_in.as_slice().expect("standard layout");
    let block_len = BLOCK_SERIES.min(series) * w * width * c;
    let mut buf = vec![0.0; block_len];
    let mut dbuf = vec![0.0; block_len];
    for s0 in (0..series).step_by(BLOCK_SERIES) {
        let count = BLOCK_SERIES.min(series - s0);
        let len = count * w * width * c;
        im2col_block(src, c, s0, count, w, width, &mut buf[..len]);
        let cols = ArrayView2::from_shape((count * w, width * c), &buf[..len]).expect("block shape");
        let drows = dpre.slice(s![s0 * w..(s0 + count) * w, ..]);
        general_mat_mul(1.0, &cols.t(), &drows, 1.0, &mut grad.weight);
        let mut dcols = ArrayViewMut2::from_shape((count * w, width * c), &mut dbuf[..len]).expect("block shape");
        general_mat_mul(1.0, &drows, &kernel.weight.t(), 0.0, &mut dcols);
        col2im_block(
            &dbuf[..len],
            c,
            s0,
            count,
            w,
            width,
            din.as_slice_mut().expect("standard layout"),
        );
    }
    Zip::from(&mut din).and(&cache.relu_in).for_each(|d, &x| {
        if x <= 0.0 {
            *d = 0.0;
        }
    });
    din
}

/// Single convolution layer on one window's `N × w × C` features.
pub fn temporal_conv(kernel: &Linear, input: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (n, w, c) = input.dim();
    if !kernel.input_dim().is_multiple_of(c) {
        return Err(Error::Shape(format!(
            "kernel input {} is not a multiple of {c} channels",
            kernel.input_dim()
        )));
    }
    let width = kernel.input_dim() / c;
    if width > w {
        return Err(Error::Config(format!("kernel width {width} exceeds window {w}")));
    }
    let rows = input
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * w, c))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (out, _) = conv_layer(kernel, &rows, n, w);
    let o = out.ncols();
    out.into_shape_with_order((n, w, o))
        .map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    series: usize,
    w: usize,
    layers: Vec<ConvCache>,
    /// Final time-resolved tensor before pooling.
    last: Array2<f64>,
    /// Max pooling argmax row offsets, per output entry.
    argmax: Option<Vec<usize>>,
}

/// Conv stack then pooling: `(series·w) × C` → `series × F`.
pub fn temporal_forward(
    params: &TemporalParams,
    timewise: &Array2<f64>,
    series: usize,
    w: usize,
) -> Result<(Array2<f64>, TemporalCache)> {
    if timewise.nrows() != series * w {
        return Err(Error::Shape(format!(
            "{} rows for {series} series of length {w}",
            timewise.nrows()
        )));
    }
    let mut h = timewise.clone();
    let mut layers = Vec::with_capacity(params.kernels.len());
    for k in &params.kernels {
        let (out, cache) = conv_layer(k, &h, series, w);
        layers.push(cache);
        h = out;
    }
    let f = h.ncols();
    let mut pooled = Array2::zeros((series, f));
    let argmax = match params.config.pooling {
        Pooling::Mean => {
            for s in 0..series {
                for t in 0..w {
                    for c in 0..f {
                        pooled[[s, c]] += h[[s * w + t, c]];
                    }
                }
            }
            pooled.mapv_inplace(|v| v / w as f64);
            None
        }
        Pooling::Max => {
            let mut arg = vec![0; series * f];
            for s in 0..series {
                for c in 0..f {
                    let mut best = 0;
                    for t in 1..w {
                        if h[[s * w + t, c]] > h[[s * w + best, c]] {
                            best = t;
                        }
                    }
                    pooled[[s, c]] = h[[s * w + best, c]];
                    arg[s * f + c] = best;
                }
            }
            Some(arg)
        }
    };
    Ok((
        pooled,
        TemporalCache {
            series,
            w,
            layers,
            last: h,
            argmax,
        },
    ))
}

/// Accumulates kernel gradients; returns `dL/d timewise`.
pub fn temporal_backward(
    params: &TemporalParams,
    cache: &TemporalCache,
    dpooled: &Array2<f64>,
    grad: &mut TemporalParams,
) -> Array2<f64> {
    let (series, w) = (cache.series, cache.w);
    let f = cache.last.ncols();
    let mut d = Array2::zeros(cache.last.raw_dim());
    match &cache.argmax {
        None => {
            let inv = 1.0 / w as f64;
            for s in 0..series {
                for t in 0..w {
                    for c in 0..f {
                        d[[s * w + t, c]] = dpooled[[s, c]] * inv;
                    }
                }
            }
        }
        Some(arg) => {
            for s in 0..series {
                for c in 0..f {
                    d[[s * w + arg[s * f + c], c]] = dpooled[[s, c]];
                }
            }
        }
    }
    for l in (0..params.kernels.len()).rev() {
        d = conv_layer_backward(
            &params.kernels[l],
            &cache.layers[l],
            &d,
            series,
            w,
            &mut grad.kernels[l],
        );
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kernel: usize, layers: usize, c: usize, w: usize) -> TemporalConfig {
        TemporalConfig {
            window: w,
            in_channels: c,
            out_channels: c,
            kernel,
            layers,
            pooling: Pooling::Mean,
            enabled: true,
        }
    }

    #[test]
    fn identity_kernel_on_nonnegative_input() {
        let mut k = Linear::zeros(2, 2);
        k.weight[[0, 0]] = 1.0;
        k.weight[[1, 1]] = 1.0;
        let x = Array3::from_shape_fn((3, 5, 2), |(i, t, c)| (i + t + c) as f64 * 0.25);
        let y = temporal_conv(&k, x.view()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn averaging_kernel_keeps_constant_interior() {
        let mut k = Linear::zeros(3, 1);
        k.weight.fill(1.0 / 3.0);
        let x = Array3::from_elem((1, 8, 1), 0.6);
        let y = temporal_conv(&k, x.view()).unwrap();
        for t in 1..7 {
            assert!((y[[0, t, 0]] - 0.6).abs() < 1e-12);
        }
        // zero padding pulls the boundaries down
        assert!(y[[0, 0, 0]] < 0.6);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TemporalParams::new(cfg(9, 1, 2, 8), &mut rng).is_err());
        assert!(TemporalParams::new(cfg(8, 1, 2, 8), &mut rng).is_ok());
    }

    #[test]
    fn width_one_identity_pools_to_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = TemporalParams::new(cfg(1, 1, 2, 6), &mut rng).unwrap();
        p.kernels[0] = Linear::zeros(2, 2);
        p.kernels[0].weight[[0, 0]] = 1.0;
        p.kernels[0].weight[[1, 1]] = 1.0;
        let x = Array2::from_shape_fn((2 * 6, 2), |(r, c)| if (r / 6 + c) % 2 == 0 { 0.7 } else { -0.4 });
        let (pooled, _) = temporal_forward(&p, &x, 2, 6).unwrap();
        let want = Array2::from_shape_fn((2, 2), |(s, c)| if (s + c) % 2 == 0 { 0.7 } else { 0.0 });
        assert!((&pooled - &want).iter().all(|d| d.abs() < 1e-12), "{pooled}");
    }

    #[test]
    fn time_shuffle_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = TemporalParams::new(cfg(3, 1, 2, 8), &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((8, 2), || rng.random_range(0.0..1.0));
        let mut shuffled = x.clone();
        for t in 0..8 {
            shuffled.row_mut(t).assign(&x.row((t * 3) % 8));
        }
        let (a, _) = temporal_forward(&p, &x, 1, 8).unwrap();
        let (b, _) = temporal_forward(&p, &shuffled, 1, 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn disabled_stack_pools_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = cfg(3, 2, 2, 4);
        c.enabled = false;
        let p = TemporalParams::new(c, &mut rng).unwrap();
        assert!(p.kernels.is_empty());
        let x = Array2::from_shape_fn((4, 2), |(t, c)| (t * 2 + c) as f64);
        let (pooled, _) = temporal_forward(&p, &x, 1, 4).unwrap();
        assert_eq!(pooled.row(0).to_vec(), vec![3.0, 4.0]);
    }
}
