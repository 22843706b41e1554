//! Multimodal graph attention.
//!
//! Each layer runs three aggregations in parallel and fuses them:
//!
//! * multi-head scaled dot-product attention over the TopK graph,
//! * intra-modal relational attention over same-modality neighbors,
//! * inter-modal relational attention over cross-modality neighbors.
//!
//! Nodes carry two feature views. `summary` is one vector per node per
//! window (`[x̂ W_in ‖ v]` at the input); attention scores are computed from
//! it. `timewise` keeps a channel vector for every time slice of the window
//! and is aggregated with the very same coefficients, shared across slices,
//! so the temporal convolution downstream still sees a time axis.
//!
//! Features are batched: rows of `summary` are `(b, i)` pairs and rows of
//! `timewise` are `(b, i, t)` triples, both in row-major order.

use ndarray::{concatenate, s, Array2, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Adjacency, GraphTopology};
use crate::nn::{
    join, relu_backward_inplace, sigmoid, softmax_backward, softmax_inplace, uniform_init, Linear, Params,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgatConfig {
    pub window: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Channels of the per-reading lift that seeds `timewise`.
    pub lift_channels: usize,
    /// `timewise` channels after each layer.
    pub time_channels: usize,
    /// Hidden width of the relational scoring network.
    pub relation_hidden: usize,
    /// Intra/inter branches present.
    pub modal: bool,
    /// Learned attention; when false every neighbor gets equal weight.
    pub attention: bool,
}

impl MgatConfig {
    pub fn summary_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn output_channels(&self) -> usize {
        if self.layers == 0 {
            self.lift_channels
        } else {
            self.time_channels
        }
    }

    fn branches(&self) -> usize {
        if self.modal {
            3
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.summary_dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "summary width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.layers > 0 && !self.time_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "time channels {} are not divisible by {} heads",
                self.time_channels, self.heads
            )));
        }
        if self.window < 2 || self.embed_dim == 0 || self.lift_channels == 0 || self.relation_hidden == 0 {
            return Err(Error::Config("window >= 2 and positive widths required".into()));
        }
        Ok(())
    }
}

/// Per-head projections, stored side by side: head `s` owns column block `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value_summary: Array2<f64>,
    pub value_time: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationalParams {
    /// First scoring layer over `[v_i ‖ v_j]`.
    pub score_hidden: Linear,
    /// `relation_hidden × 1`
    pub score_out: Array2<f64>,
    pub value_summary: Array2<f64>,
    pub value_time: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgatLayerParams {
    pub attention: AttentionParams,
    pub intra: Option<RelationalParams>,
    pub inter: Option<RelationalParams>,
    pub fuse_summary: Linear,
    pub fuse_time: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgatParams {
    pub config: MgatConfig,
    /// `w × d` input projection.
    pub input_map: Array2<f64>,
    /// Scalar reading → `lift_channels`.
    pub lift: Linear,
    pub layers: Vec<MgatLayerParams>,
}

impl MgatParams {
    pub fn new(config: MgatConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.summary_dim();
        let e = config.embed_dim;
        let ch = config.time_channels;
        let input_map = uniform_init(config.window, e, config.window, rng);
        let lift = Linear::new(1, config.lift_channels, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let c_in = if l == 0 { config.lift_channels } else { ch };
            let attention = AttentionParams {
                query: uniform_init(d, d, d, rng),
                key: uniform_init(d, d, d, rng),
                value_summary: uniform_init(d, d, d, rng),
                value_time: uniform_init(c_in, ch, c_in, rng),
            };
            let mut relational = || RelationalParams {
                score_hidden: Linear::new(2 * e, config.relation_hidden, rng),
                score_out: uniform_init(config.relation_hidden, 1, config.relation_hidden, rng),
                value_summary: uniform_init(d, d, d, rng),
                value_time: uniform_init(c_in, ch, c_in, rng),
            };
            let (intra, inter) = if config.modal {
                (Some(relational()), Some(relational()))
            } else {
                (None, None)
            };
            let k = config.branches();
            layers.push(MgatLayerParams {
                attention,
                intra,
                inter,
                fuse_summary: Linear::new(k * d, d, rng),
                fuse_time: Linear::new(k * ch, ch, rng),
            });
        }
        Ok(MgatParams {
            config,
            input_map,
            lift,
            layers,
        })
    }
}

impl Params for MgatParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        f(&join(prefix, "input_map"), &self.input_map);
        self.lift.visit(&join(prefix, "lift"), f);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{l}"));
            let a = &layer.attention;
            f(&join(&p, "att.query"), &a.query);
            f(&join(&p, "att.key"), &a.key);
            f(&join(&p, "att.value_summary"), &a.value_summary);
            f(&join(&p, "att.value_time"), &a.value_time);
            for (name, rel) in [("intra", &layer.intra), ("inter", &layer.inter)] {
                if let Some(r) = rel {
                    let q = join(&p, name);
                    r.score_hidden.visit(&join(&q, "score_hidden"), f);
                    f(&join(&q, "score_out"), &r.score_out);
                    f(&join(&q, "value_summary"), &r.value_summary);
                    f(&join(&q, "value_time"), &r.value_time);
                }
            }
            layer.fuse_summary.visit(&join(&p, "fuse_summary"), f);
            layer.fuse_time.visit(&join(&p, "fuse_time"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        f(&mut self.input_map);
        self.lift.visit_mut(f);
        for layer in &mut self.layers {
            let a = &mut layer.attention;
            f(&mut a.query);
            f(&mut a.key);
            f(&mut a.value_summary);
            f(&mut a.value_time);
            for r in [&mut layer.intra, &mut layer.inter].into_iter().flatten() {
                r.score_hidden.visit_mut(f);
                f(&mut r.score_out);
                f(&mut r.value_summary);
                f(&mut r.value_time);
            }
            layer.fuse_summary.visit_mut(f);
            layer.fuse_time.visit_mut(f);
        }
    }
}

/// Batched node features.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub batch: usize,
    pub n: usize,
    pub window: usize,
    /// `(B·N) × D`
    pub summary: Array2<f64>,
    /// `(B·N·w) × C`
    pub timewise: Array2<f64>,
}

impl LayerFeatures {
    pub fn summary_of(&self, b: usize) -> ArrayView2<'_, f64> {
        self.summary.slice(s![b * self.n..(b + 1) * self.n, ..])
    }

    /// `N × w × C` view of window `b`.
    pub fn timewise_of(&self, b: usize) -> ArrayView3<'_, f64> {
        let rows = self.n * self.window;
        self.timewise
            .slice(s![b * rows..(b + 1) * rows, ..])
            .into_shape_with_order((self.n, self.window, self.timewise.ncols()))
            .expect("timewise rows are contiguous")
    }

    pub fn is_finite(&self) -> bool {
        self.summary.iter().chain(self.timewise.iter()).all(|v| v.is_finite())
    }
}

/// Flattened neighbor lists: edges of node `i` are `offsets[i]..offsets[i+1]`.
#[derive(Debug, Clone)]
struct Edges {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Edges {
    fn from(adj: &Adjacency) -> Self {
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        for row in &adj.neighbors {
            targets.extend_from_slice(row);
            offsets.push(targets.len());
        }
        Edges { offsets, targets }
    }

    fn len(&self) -> usize {
        self.targets.len()
    }

    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Layout of one aggregation: `rows_per_node` is 1 for summary and `w` for
/// timewise; head `h` covers columns `h*block..(h+1)*block`.
#[derive(Clone, Copy)]
struct Layout {
    batch: usize,
    n: usize,
    rows_per_node: usize,
    width: usize,
}

/// `out[(b,i,·), block h] += Σ_e coef(h, b, e) · vals[(b,j,·), block h]`
fn aggregate(
    layout: Layout,
    heads: usize,
    edges: &Edges,
    coef: &dyn Fn(usize, usize, usize) -> f64,
    vals: &[f64],
    out: &mut [f64],
) {
    let Layout {
        batch,
        n,
        rows_per_node: r,
        width,
    } = layout;
    let block = width / heads;
    // Coefficient of each column for the current edge.
    let mut crow = vec![0.0; width];
    for b in 0..batch {
        for i in 0..n {
            let dst0 = (b * n + i) * r;
            for e in edges.range(i) {
                let j = edges.targets[e];
                let src0 = (b * n + j) * r;
                let mut any = false;
                for h in 0..heads {
                    let a = coef(h, b, e);
                    any |= a != 0.0;
                    crow[h * block..(h + 1) * block].fill(a);
                }
                if !any {
                    continue;
                }
                for t in 0..r {
                    let src = &vals[(src0 + t) * width..][..width];
                    let dst = &mut out[(dst0 + t) * width..][..width];
                    for ((d, s), a) in dst.iter_mut().zip(src).zip(&crow) {
                        *d += a * s;
                    }
                }
            }
        }
    }
}

/// Backward of [`aggregate`]: accumulates into `dvals` and reports
/// `dL/dcoef(h, b, e)` through `dcoef`.
#[allow(clippy::too_many_arguments)]
fn aggregate_backward(
    layout: Layout,
    heads: usize,
    edges: &Edges,
    coef: &dyn Fn(usize, usize, usize) -> f64,
    vals: &[f64],
    dout: &[f64],
    dvals: &mut [f64],
    dcoef: &mut dyn FnMut(usize, usize, usize, f64),
) {
    let Layout {
        batch,
        n,
        rows_per_node: r,
        width,
    } = layout;
    let block = width / heads;
    let mut crow = vec![0.0; width];
    let mut acc = vec![0.0; width];
    for b in 0..batch {
        for i in 0..n {
            let dst0 = (b * n + i) * r;
            for e in edges.range(i) {
                let j = edges.targets[e];
                let src0 = (b * n + j) * r;
                for h in 0..heads {
                    crow[h * block..(h + 1) * block].fill(coef(h, b, e));
                }
                acc.fill(0.0);
                for t in 0..r {
                    let g = &dout[(dst0 + t) * width..][..width];
                    let v = &vals[(src0 + t) * width..][..width];
                    let dv = &mut dvals[(src0 + t) * width..][..width];
                    for c in 0..width {
                        acc[c] += g[c] * v[c];
                        dv[c] += crow[c] * g[c];
                    }
                }
                for h in 0..heads {
                    dcoef(h, b, e, acc[h * block..(h + 1) * block].iter().sum());
                }
            }
        }
    }
}

fn slice_of(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_of_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Output of one aggregation branch.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `(B·N) × D`, absent when the summary view was not requested.
    pub summary: Option<Array2<f64>>,
    /// `(B·N·w) × C_h`
    pub timewise: Array2<f64>,
}

#[derive(Debug, Clone)]
struct AttentionCache {
    query: Option<Array2<f64>>,
    key: Option<Array2<f64>>,
    /// `alpha[(h·B + b)·E + e]`
    alpha: Vec<f64>,
    values_time: Array2<f64>,
    values_summary: Option<Array2<f64>>,
}

/// Attention coefficients of one multi-head layer for window `b`: for each
/// head, node and neighbor, `(neighbor, weight)`.
pub type HeadWeights = Vec<Vec<Vec<(usize, f64)>>>;

/// Layer-0 summary in factored form, `[readings · input_map ‖ tile(emb)]`.
/// Projecting through the factors avoids a `(B·N) × D × D` product.
#[derive(Clone, Copy)]
struct FirstLayer<'a> {
    readings: &'a Array2<f64>,
    input_map: &'a Array2<f64>,
    emb: ArrayView2<'a, f64>,
}

fn project_summary(summary: &Array2<f64>, w: &Array2<f64>, first: Option<FirstLayer>) -> Array2<f64> {
    let Some(f) = first else {
        return summary.dot(w);
    };
    let e = f.emb.ncols();
    let n = f.emb.nrows();
    let mut out = f.readings.dot(&f.input_map.dot(&w.slice(s![..e, ..])));
    let node = f.emb.dot(&w.slice(s![e.., ..]));
    for mut rows in out.axis_chunks_iter_mut(Axis(0), n) {
        rows += &node;
    }
    out
}

/// Backward of [`project_summary`]. In factored form the input gradient goes
/// straight to `d_input_map` and `d_emb` instead of `d_summary`.
fn project_summary_backward(
    summary: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    first: Option<FirstLayerGrad>,
    grad_w: &mut Array2<f64>,
    d_summary: &mut Array2<f64>,
) {
    let Some(f) = first else {
        *grad_w += &summary.t().dot(dy);
        *d_summary += &dy.dot(&w.t());
        return;
    };
    let e = f.emb.ncols();
    let n = f.emb.nrows();
    let r = f.readings.t().dot(dy);
    let mut dy_nodes = Array2::<f64>::zeros((n, dy.ncols()));
    for rows in dy.axis_chunks_iter(Axis(0), n) {
        dy_nodes += &rows;
    }
    {
        let mut g = grad_w.slice_mut(s![..e, ..]);
        g += &f.input_map.t().dot(&r);
    }
    {
        let mut g = grad_w.slice_mut(s![e.., ..]);
        g += &f.emb.t().dot(&dy_nodes);
    }
    *f.d_input_map += &r.dot(&w.slice(s![..e, ..]).t());
    *f.d_emb += &dy_nodes.dot(&w.slice(s![e.., ..]).t());
}

struct FirstLayerGrad<'a> {
    readings: &'a Array2<f64>,
    input_map: &'a Array2<f64>,
    emb: ArrayView2<'a, f64>,
    d_input_map: &'a mut Array2<f64>,
    d_emb: &'a mut Array2<f64>,
}

fn attention_forward(
    p: &AttentionParams,
    cfg: &MgatConfig,
    feat: &LayerFeatures,
    edges: &Edges,
    keep_summary: bool,
    first: Option<FirstLayer>,
) -> (BranchOutput, AttentionCache) {
    let (bsz, n, w) = (feat.batch, feat.n, feat.window);
    let heads = cfg.heads;
    let e_count = edges.len();
    let mut alpha = vec![0.0; heads * bsz * e_count];
    let (query, key) = if cfg.attention {
        let q = project_summary(&feat.summary, &p.query, first);
        let k = project_summary(&feat.summary, &p.key, first);
        let dk = q.ncols() / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks) = (slice_of(&q), slice_of(&k));
        let width = q.ncols();
        for h in 0..heads {
            for b in 0..bsz {
                for i in 0..n {
                    let range = edges.range(i);
                    let qi = &qs[(b * n + i) * width + h * dk..][..dk];
                    let base = (h * bsz + b) * e_count;
                    for e in range.clone() {
                        let j = edges.targets[e];
                        let kj = &ks[(b * n + j) * width + h * dk..][..dk];
                        alpha[base + e] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    softmax_inplace(&mut alpha[base + range.start..base + range.end]);
                }
            }
        }
        (Some(q), Some(k))
    } else {
        for h in 0..heads {
            for b in 0..bsz {
                for i in 0..n {
                    let range = edges.range(i);
                    let u = 1.0 / range.len() as f64;
                    let base = (h * bsz + b) * e_count;
                    alpha[base + range.start..base + range.end].fill(u);
                }
            }
        }
        (None, None)
    };
    let coef = |h: usize, b: usize, e: usize| alpha[(h * bsz + b) * e_count + e];

    let values_time = feat.timewise.dot(&p.value_time);
    let mut timewise = Array2::zeros(values_time.raw_dim());
    let lt = Layout {
        batch: bsz,
        n,
        rows_per_node: w,
        width: values_time.ncols(),
    };
    aggregate(
        lt,
        heads,
        edges,
        &coef,
        slice_of(&values_time),
        slice_of_mut(&mut timewise),
    );

    let (values_summary, summary) = if keep_summary {
        let vs = feat.summary.dot(&p.value_summary);
        let mut out = Array2::zeros(vs.raw_dim());
        let ls = Layout {
            batch: bsz,
            n,
            rows_per_node: 1,
            width: vs.ncols(),
        };
        aggregate(ls, heads, edges, &coef, slice_of(&vs), slice_of_mut(&mut out));
        (Some(vs), Some(out))
    } else {
        (None, None)
    };
    (
        BranchOutput { summary, timewise },
        AttentionCache {
            query,
            key,
            alpha,
            values_time,
            values_summary,
        },
    )
}

#[derive(Debug, Clone)]
struct RelationCache {
    /// Pre-activation of the scoring hidden layer, one row per edge.
    hidden_pre: Array2<f64>,
    g: Vec<f64>,
    beta: Vec<f64>,
    values_time: Array2<f64>,
    values_summary: Option<Array2<f64>>,
}

/// Relational coefficients `β` over the edges of `edges`, computed from
/// embeddings alone: `g = σ(ReLU([v_i ‖ v_j] W₁ + b₁) W₂)`, softmax per node.
fn relation_scores(p: &RelationalParams, emb: ArrayView2<f64>, edges: &Edges) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let e_dim = emb.ncols();
    let w1 = &p.score_hidden.weight;
    let left = emb.dot(&w1.slice(s![..e_dim, ..]));
    let right = emb.dot(&w1.slice(s![e_dim.., ..]));
    let hidden = w1.ncols();
    let n = emb.nrows();
    let mut pre = Array2::zeros((edges.len(), hidden));
    let mut g = vec![0.0; edges.len()];
    for i in 0..n {
        for e in edges.range(i) {
            let j = edges.targets[e];
            let mut acc = 0.0;
            for k in 0..hidden {
                let z = left[[i, k]] + right[[j, k]] + p.score_hidden.bias[[0, k]];
                pre[[e, k]] = z;
                acc += z.max(0.0) * p.score_out[[k, 0]];
            }
            g[e] = sigmoid(acc);
        }
    }
    let mut beta = g.clone();
    for i in 0..n {
        softmax_inplace(&mut beta[edges.range(i)]);
    }
    (pre, g, beta)
}

fn relational_forward(
    p: &RelationalParams,
    emb: ArrayView2<f64>,
    feat: &LayerFeatures,
    edges: &Edges,
    keep_summary: bool,
) -> (BranchOutput, RelationCache) {
    let (bsz, n, w) = (feat.batch, feat.n, feat.window);
    let (hidden_pre, g, beta) = relation_scores(p, emb, edges);
    let coef = |_: usize, _: usize, e: usize| beta[e];
    let values_time = feat.timewise.dot(&p.value_time);
    let mut timewise = Array2::zeros(values_time.raw_dim());
    let lt = Layout {
        batch: bsz,
        n,
        rows_per_node: w,
        width: values_time.ncols(),
    };
    aggregate(lt, 1, edges, &coef, slice_of(&values_time), slice_of_mut(&mut timewise));
    let (values_summary, summary) = if keep_summary {
        let vs = feat.summary.dot(&p.value_summary);
        let mut out = Array2::zeros(vs.raw_dim());
        let ls = Layout {
            batch: bsz,
            n,
            rows_per_node: 1,
            width: vs.ncols(),
        };
        aggregate(ls, 1, edges, &coef, slice_of(&vs), slice_of_mut(&mut out));
        (Some(vs), Some(out))
    } else {
        (None, None)
    };
    (
        BranchOutput { summary, timewise },
        RelationCache {
            hidden_pre,
            g,
            beta,
            values_time,
            values_summary,
        },
    )
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: LayerFeatures,
    att: AttentionCache,
    intra: Option<(Edges, RelationCache)>,
    inter: Option<(Edges, RelationCache)>,
    topk: Edges,
    fused_time_in: Array2<f64>,
    fused_time_out: Array2<f64>,
    fused_summary: Option<(Array2<f64>, Array2<f64>)>,
}

/// `ReLU(o W_out + b_out)` with `o` the column concatenation of the branches.
pub fn fuse(parts: &[ArrayView2<f64>], fuse: &Linear) -> Result<(Array2<f64>, Array2<f64>)> {
    let rows = parts.first().map(|p| p.nrows()).unwrap_or(0);
    if parts.iter().any(|p| p.nrows() != rows) {
        return Err(Error::Shape("fusion inputs have different row counts".into()));
    }
    let o = concatenate(Axis(1), parts).map_err(|e| Error::Shape(e.to_string()))?;
    if o.ncols() != fuse.input_dim() {
        return Err(Error::Shape(format!(
            "fusion expects width {}, got {}",
            fuse.input_dim(),
            o.ncols()
        )));
    }
    let mut y = fuse.forward(o.view());
    y.mapv_inplace(|v| v.max(0.0));
    Ok((o, y))
}

fn layer_forward(
    lp: &MgatLayerParams,
    cfg: &MgatConfig,
    emb: ArrayView2<f64>,
    topo: &GraphTopology,
    input: LayerFeatures,
    keep_summary: bool,
    first: Option<FirstLayer>,
) -> (LayerFeatures, LayerCache) {
    let topk = Edges::from(&topo.topk);
    let (att_out, att) = attention_forward(&lp.attention, cfg, &input, &topk, keep_summary, first);
    let relational = |rp: &Option<RelationalParams>, adj: &Adjacency| {
        rp.as_ref().map(|p| {
            let edges = Edges::from(adj);
            let (out, cache) = relational_forward(p, emb, &input, &edges, keep_summary);
            (out, (edges, cache))
        })
    };
    let intra = relational(&lp.intra, &topo.intra);
    let inter = relational(&lp.inter, &topo.inter);

    let mut time_parts = vec![att_out.timewise.view()];
    let mut summary_parts = att_out.summary.iter().map(|s| s.view()).collect::<Vec<_>>();
    for (out, _) in intra.iter().chain(inter.iter()) {
        time_parts.push(out.timewise.view());
        if let Some(s) = &out.summary {
            summary_parts.push(s.view());
        }
    }
    let (fused_time_in, fused_time_out) = fuse(&time_parts, &lp.fuse_time).expect("branch shapes agree");
    let fused_summary = keep_summary.then(|| fuse(&summary_parts, &lp.fuse_summary).expect("branch shapes agree"));

    let output = LayerFeatures {
        batch: input.batch,
        n: input.n,
        window: input.window,
        summary: fused_summary
            .as_ref()
            .map(|(_, y)| y.clone())
            .unwrap_or_else(|| Array2::zeros((0, input.summary.ncols()))),
        timewise: fused_time_out.clone(),
    };
    let cache = LayerCache {
        input,
        att,
        intra: intra.map(|(_, c)| c),
        inter: inter.map(|(_, c)| c),
        topk,
        fused_time_in,
        fused_time_out,
        fused_summary,
    };
    (output, cache)
}

/// Gradient of the relational scores with respect to scorer parameters and
/// embeddings, given `dL/dβ` per edge.
fn relation_scores_backward(
    p: &RelationalParams,
    emb: ArrayView2<f64>,
    edges: &Edges,
    cache: &RelationCache,
    dbeta: &[f64],
    grad: &mut RelationalParams,
    d_emb: &mut Array2<f64>,
) {
    let n = emb.nrows();
    let e_dim = emb.ncols();
    let hidden = p.score_out.nrows();
    let mut d_left = Array2::<f64>::zeros((n, hidden));
    let mut d_right = Array2::<f64>::zeros((n, hidden));
    for i in 0..n {
        let range = edges.range(i);
        if range.is_empty() {
            continue;
        }
        let dg = softmax_backward(&cache.beta[range.clone()], &dbeta[range.clone()]);
        for (k, e) in range.enumerate() {
            let j = edges.targets[e];
            let g = cache.g[e];
            let dz = dg[k] * g * (1.0 - g);
            for h in 0..hidden {
                let pre = cache.hidden_pre[[e, h]];
                grad.score_out[[h, 0]] += dz * pre.max(0.0);
                if pre > 0.0 {
                    let dpre = dz * p.score_out[[h, 0]];
                    grad.score_hidden.bias[[0, h]] += dpre;
                    d_left[[i, h]] += dpre;
                    d_right[[j, h]] += dpre;
                }
            }
        }
    }
    let w1 = &p.score_hidden.weight;
    {
        let mut gw = grad.score_hidden.weight.slice_mut(s![..e_dim, ..]);
        gw += &emb.t().dot(&d_left);
    }
    {
        let mut gw = grad.score_hidden.weight.slice_mut(s![e_dim.., ..]);
        gw += &emb.t().dot(&d_right);
    }
    *d_emb += &d_left.dot(&w1.slice(s![..e_dim, ..]).t());
    *d_emb += &d_right.dot(&w1.slice(s![e_dim.., ..]).t());
}

/// Returns `(dL/d summary_in, dL/d timewise_in)`.
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    lp: &MgatLayerParams,
    cfg: &MgatConfig,
    emb: ArrayView2<f64>,
    cache: &LayerCache,
    d_time_out: &Array2<f64>,
    d_summary_out: Option<&Array2<f64>>,
    grad: &mut MgatLayerParams,
    d_emb: &mut Array2<f64>,
    mut d_input_map: Option<&mut Array2<f64>>,
    first: Option<FirstLayer>,
) -> (Array2<f64>, Array2<f64>) {
    let input = &cache.input;
    let (bsz, n, w) = (input.batch, input.n, input.window);
    let heads = cfg.heads;
    let mut d_summary_in = Array2::<f64>::zeros(input.summary.raw_dim());
    let mut d_time_in = Array2::<f64>::zeros(input.timewise.raw_dim());

    // fusion
    let mut d_pre = d_time_out.clone();
    relu_backward_inplace(&mut d_pre, &cache.fused_time_out);
    let d_o_time = lp
        .fuse_time
        .backward(cache.fused_time_in.view(), d_pre.view(), &mut grad.fuse_time);
    let d_o_summary = match (d_summary_out, &cache.fused_summary) {
        (Some(ds), Some((o, y))) => {
            let mut d_pre = ds.clone();
            relu_backward_inplace(&mut d_pre, y);
            Some(lp.fuse_summary.backward(o.view(), d_pre.view(), &mut grad.fuse_summary))
        }
        _ => None,
    };
    let ch = d_o_time.ncols() / cfg.branches();
    let dsum = d_o_summary.as_ref().map(|d| d.ncols() / cfg.branches());
    let branch_time = |k: usize| d_o_time.slice(s![.., k * ch..(k + 1) * ch]).to_owned();
    let branch_summary = |k: usize| {
        d_o_summary.as_ref().map(|d| {
            let w = dsum.unwrap();
            d.slice(s![.., k * w..(k + 1) * w]).to_owned()
        })
    };

    // multi-head attention
    {
        let att = &cache.att;
        let e_count = cache.topk.len();
        let coef = |h: usize, b: usize, e: usize| att.alpha[(h * bsz + b) * e_count + e];
        let mut dalpha = vec![0.0; att.alpha.len()];
        let d_att_t = branch_time(0);
        let mut d_vals_t = Array2::<f64>::zeros(att.values_time.raw_dim());
        let lt = Layout {
            batch: bsz,
            n,
            rows_per_node: w,
            width: att.values_time.ncols(),
        };
        aggregate_backward(
            lt,
            heads,
            &cache.topk,
            &coef,
            slice_of(&att.values_time),
            slice_of(&d_att_t),
            slice_of_mut(&mut d_vals_t),
            &mut |h, b, e, v| dalpha[(h * bsz + b) * e_count + e] += v,
        );
        grad.attention.value_time += &input.timewise.t().dot(&d_vals_t);
        d_time_in += &d_vals_t.dot(&lp.attention.value_time.t());

        if let (Some(d_att_s), Some(vs)) = (branch_summary(0), &att.values_summary) {
            let mut d_vals_s = Array2::<f64>::zeros(vs.raw_dim());
            let ls = Layout {
                batch: bsz,
                n,
                rows_per_node: 1,
                width: vs.ncols(),
            };
            aggregate_backward(
                ls,
                heads,
                &cache.topk,
                &coef,
                slice_of(vs),
                slice_of(&d_att_s),
                slice_of_mut(&mut d_vals_s),
                &mut |h, b, e, v| dalpha[(h * bsz + b) * e_count + e] += v,
            );
            grad.attention.value_summary += &input.summary.t().dot(&d_vals_s);
            d_summary_in += &d_vals_s.dot(&lp.attention.value_summary.t());
        }

        if let (Some(q), Some(k)) = (&att.query, &att.key) {
            let width = q.ncols();
            let dk = width / heads;
            let scale = 1.0 / (dk as f64).sqrt();
            let mut dq = Array2::<f64>::zeros(q.raw_dim());
            let mut dkm = Array2::<f64>::zeros(k.raw_dim());
            let (qs, ks) = (slice_of(q), slice_of(k));
            let dqs = slice_of_mut(&mut dq);
            let dks = slice_of_mut(&mut dkm);
            for h in 0..heads {
                for b in 0..bsz {
                    let base = (h * bsz + b) * e_count;
                    for i in 0..n {
                        let range = cache.topk.range(i);
                        let ds = softmax_backward(
                            &att.alpha[base + range.start..base + range.end],
                            &dalpha[base + range.start..base + range.end],
                        );
                        let qi0 = (b * n + i) * width + h * dk;
                        for (m, e) in range.enumerate() {
                            let j = cache.topk.targets[e];
                            let kj0 = (b * n + j) * width + h * dk;
                            let g = ds[m] * scale;
                            for c in 0..dk {
                                dqs[qi0 + c] += g * ks[kj0 + c];
                                dks[kj0 + c] += g * qs[qi0 + c];
                            }
                        }
                    }
                }
            }
            for (dy, w, g) in [
                (&dq, &lp.attention.query, &mut grad.attention.query),
                (&dkm, &lp.attention.key, &mut grad.attention.key),
            ] {
                let fg = match (first, d_input_map.as_deref_mut()) {
                    (Some(f), Some(dm)) => Some(FirstLayerGrad {
                        readings: f.readings,
                        input_map: f.input_map,
                        emb: f.emb,
                        d_input_map: dm,
                        d_emb: &mut *d_emb,
                    }),
                    _ => None,
                };
                project_summary_backward(&input.summary, w, dy, fg, g, &mut d_summary_in);
            }
        }
    }

    // relational branches
    let rel = [
        (1usize, &lp.intra, &cache.intra, &mut grad.intra),
        (2usize, &lp.inter, &cache.inter, &mut grad.inter),
    ];
    for (k, params, rc, g) in rel {
        let (Some(p), Some((edges, rc)), Some(g)) = (params, rc, g.as_mut()) else {
            continue;
        };
        let coef = |_: usize, _: usize, e: usize| rc.beta[e];
        let mut dbeta = vec![0.0; rc.beta.len()];
        let d_rel_t = branch_time(k);
        let mut d_vals_t = Array2::<f64>::zeros(rc.values_time.raw_dim());
        let lt = Layout {
            batch: bsz,
            n,
            rows_per_node: w,
            width: rc.values_time.ncols(),
        };
        aggregate_backward(
            lt,
            1,
            edges,
            &coef,
            slice_of(&rc.values_time),
            slice_of(&d_rel_t),
            slice_of_mut(&mut d_vals_t),
            &mut |_, _, e, v| dbeta[e] += v,
        );
        g.value_time += &input.timewise.t().dot(&d_vals_t);
        d_time_in += &d_vals_t.dot(&p.value_time.t());
        if let (Some(d_rel_s), Some(vs)) = (branch_summary(k), &rc.values_summary) {
            let mut d_vals_s = Array2::<f64>::zeros(vs.raw_dim());
            let ls = Layout {
                batch: bsz,
                n,
                rows_per_node: 1,
                width: vs.ncols(),
            };
            aggregate_backward(
                ls,
                1,
                edges,
                &coef,
                slice_of(vs),
                slice_of(&d_rel_s),
                slice_of_mut(&mut d_vals_s),
                &mut |_, _, e, v| dbeta[e] += v,
            );
            g.value_summary += &input.summary.t().dot(&d_vals_s);
            d_summary_in += &d_vals_s.dot(&p.value_summary.t());
        }
        relation_scores_backward(p, emb, edges, rc, &dbeta, g, d_emb);
    }
    (d_summary_in, d_time_in)
}

/// Activations retained by [`mgat_forward_batch`].
#[derive(Debug, Clone)]
pub struct MgatCache {
    /// `(B·N) × w` input readings.
    readings: Array2<f64>,
    layers: Vec<LayerCache>,
}

/// `summary = [x̂ W_in ‖ v]`, `timewise = x·a + c` per reading.
pub fn initial_features_batch(
    params: &MgatParams,
    emb: ArrayView2<f64>,
    x: ArrayView3<f64>,
) -> Result<(LayerFeatures, Array2<f64>)> {
    let (bsz, n, w) = x.dim();
    let cfg = &params.config;
    if w != cfg.window || emb.nrows() != n || emb.ncols() != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "window {n}×{w} with embeddings {}×{} does not fit window={} embed_dim={}",
            emb.nrows(),
            emb.ncols(),
            cfg.window,
            cfg.embed_dim
        )));
    }
    let readings = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((bsz * n, w))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let projected = readings.dot(&params.input_map);
    let e = cfg.embed_dim;
    let mut summary = Array2::zeros((bsz * n, 2 * e));
    summary.slice_mut(s![.., ..e]).assign(&projected);
    for b in 0..bsz {
        summary.slice_mut(s![b * n..(b + 1) * n, e..]).assign(&emb);
    }
    let c0 = cfg.lift_channels;
    let mut timewise = Array2::zeros((bsz * n * w, c0));
    for (r, &v) in readings.iter().enumerate() {
        for c in 0..c0 {
            timewise[[r, c]] = v * params.lift.weight[[0, c]] + params.lift.bias[[0, c]];
        }
    }
    Ok((
        LayerFeatures {
            batch: bsz,
            n,
            window: w,
            summary,
            timewise,
        },
        readings,
    ))
}

/// Layer-0 features of a single `N × w` window.
pub fn initial_features(params: &MgatParams, emb: ArrayView2<f64>, window: ArrayView2<f64>) -> Result<LayerFeatures> {
    Ok(initial_features_batch(params, emb, window.insert_axis(Axis(0)))?.0)
}

/// Runs all layers over a batch `x: B × N × w`. With `keep_final_summary`
/// false the last layer's summary view is skipped (its output is empty),
/// which is all the temporal stage needs.
pub fn mgat_forward_batch(
    params: &MgatParams,
    emb: ArrayView2<f64>,
    topo: &GraphTopology,
    x: ArrayView3<f64>,
    keep_final_summary: bool,
) -> Result<(LayerFeatures, MgatCache)> {
    if topo.n() != x.dim().1 {
        return Err(Error::Shape(format!(
            "topology has {} nodes, window has {}",
            topo.n(),
            x.dim().1
        )));
    }
    let (mut feat, readings) = initial_features_batch(params, emb, x)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    let last = params.layers.len().saturating_sub(1);
    for (l, lp) in params.layers.iter().enumerate() {
        let keep = keep_final_summary || l < last;
        let first = (l == 0).then_some(FirstLayer {
            readings: &readings,
            input_map: &params.input_map,
            emb,
        });
        let (next, cache) = layer_forward(lp, &params.config, emb, topo, feat, keep, first);
        layers.push(cache);
        feat = next;
    }
    Ok((feat, MgatCache { readings, layers }))
}

/// Single-window forward pass.
pub fn mgat_forward(
    params: &MgatParams,
    emb: ArrayView2<f64>,
    topo: &GraphTopology,
    window: ArrayView2<f64>,
) -> Result<LayerFeatures> {
    Ok(mgat_forward_batch(params, emb, topo, window.insert_axis(Axis(0)), true)?.0)
}

/// Accumulates parameter and embedding gradients given `dL/d timewise` of
/// the final layer (and optionally `dL/d summary`).
pub fn mgat_backward(
    params: &MgatParams,
    emb: ArrayView2<f64>,
    cache: &MgatCache,
    d_timewise: &Array2<f64>,
    d_summary: Option<&Array2<f64>>,
    grad: &mut MgatParams,
    d_emb: &mut Array2<f64>,
) {
    let cfg = &params.config;
    let mut d_time = d_timewise.clone();
    let mut d_sum: Option<Array2<f64>> = d_summary.cloned();
    for l in (0..params.layers.len()).rev() {
        let first = (l == 0).then_some(FirstLayer {
            readings: &cache.readings,
            input_map: &params.input_map,
            emb,
        });
        let (ds, dt) = layer_backward(
            &params.layers[l],
            cfg,
            emb,
            &cache.layers[l],
            &d_time,
            d_sum.as_ref(),
            &mut grad.layers[l],
            d_emb,
            (l == 0).then_some(&mut grad.input_map),
            first,
        );
        d_time = dt;
        d_sum = Some(ds);
    }
    // layer 0 inputs
    let e = cfg.embed_dim;
    let n = emb.nrows();
    if let Some(ds) = d_sum {
        grad.input_map += &cache.readings.t().dot(&ds.slice(s![.., ..e]));
        let bsz = ds.nrows() / n;
        for b in 0..bsz {
            *d_emb += &ds.slice(s![b * n..(b + 1) * n, e..]);
        }
    }
    let c0 = cfg.lift_channels;
    for (r, &v) in cache.readings.iter().enumerate() {
        for c in 0..c0 {
            let g = d_time[[r, c]];
            grad.lift.weight[[0, c]] += g * v;
            grad.lift.bias[[0, c]] += g;
        }
    }
}

/// Attention weights for one window, for inspection and export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    /// `alpha[head][node]` = `(neighbor, weight)` pairs.
    pub alpha: HeadWeights,
    pub beta_intra: Vec<Vec<(usize, f64)>>,
    pub beta_inter: Vec<Vec<(usize, f64)>>,
}

/// Coefficients used by every layer when processing `window`.
pub fn attention_coefficients(
    params: &MgatParams,
    emb: ArrayView2<f64>,
    topo: &GraphTopology,
    window: ArrayView2<f64>,
) -> Result<Vec<AttentionRecord>> {
    let (_, cache) = mgat_forward_batch(params, emb, topo, window.insert_axis(Axis(0)), true)?;
    let n = window.nrows();
    let heads = params.config.heads;
    let records = cache
        .layers
        .iter()
        .enumerate()
        .map(|(l, lc)| {
            let e_count = lc.topk.len();
            let alpha = (0..heads)
                .map(|h| {
                    (0..n)
                        .map(|i| {
                            lc.topk
                                .range(i)
                                .map(|e| (lc.topk.targets[e], lc.att.alpha[h * e_count + e]))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let betas = |rc: &Option<(Edges, RelationCache)>| -> Vec<Vec<(usize, f64)>> {
                match rc {
                    Some((edges, c)) => (0..n)
                        .map(|i| edges.range(i).map(|e| (edges.targets[e], c.beta[e])).collect())
                        .collect(),
                    None => vec![Vec::new(); n],
                }
            };
            AttentionRecord {
                layer: l,
                alpha,
                beta_intra: betas(&lc.intra),
                beta_inter: betas(&lc.inter),
            }
        })
        .collect();
    Ok(records)
}

/// Multi-head branch alone over layer `layer`'s parameters.
pub fn multi_head_attention(
    params: &MgatParams,
    layer: usize,
    feat: &LayerFeatures,
    adj: &Adjacency,
) -> (BranchOutput, HeadWeights) {
    let edges = Edges::from(adj);
    let (out, cache) = attention_forward(
        &params.layers[layer].attention,
        &params.config,
        feat,
        &edges,
        true,
        None,
    );
    let e_count = edges.len();
    let alpha = (0..params.config.heads)
        .map(|h| {
            (0..feat.n)
                .map(|i| {
                    edges
                        .range(i)
                        .map(|e| (edges.targets[e], cache.alpha[h * feat.batch * e_count + e]))
                        .collect()
                })
                .collect()
        })
        .collect();
    (out, alpha)
}

/// Relational branch alone; `p` is an intra or inter parameter set.
pub fn relational_attention(
    p: &RelationalParams,
    emb: ArrayView2<f64>,
    feat: &LayerFeatures,
    adj: &Adjacency,
) -> (BranchOutput, Vec<Vec<(usize, f64)>>) {
    let edges = Edges::from(adj);
    let (out, cache) = relational_forward(p, emb, feat, &edges, true);
    let beta = (0..feat.n)
        .map(|i| edges.range(i).map(|e| (edges.targets[e], cache.beta[e])).collect())
        .collect();
    (out, beta)
}
