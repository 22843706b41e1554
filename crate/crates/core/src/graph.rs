//! Learned series embeddings and the sparse graphs derived from them.
//!
//! Three directed relations are built from embedding cosine similarity:
//! a TopK graph over all series, an intra-modal graph restricted to
//! same-modality series, and an inter-modal graph over the rest. Every
//! TopK selection breaks ties by ascending series index.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row `i` is the embedding of series `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesEmbedding {
    pub vectors: Array2<f64>,
}

impl SeriesEmbedding {
    /// I.i.d. `U(-1/sqrt(d), 1/sqrt(d))`, redrawing any row that comes out zero.
    pub fn init(n: usize, d: usize, rng: &mut impl Rng) -> Self {
        assert!(d >= 1, "embedding dimension must be positive");
        let bound = 1.0 / (d as f64).sqrt();
        let mut vectors = Array2::zeros((n, d));
        for mut row in vectors.rows_mut() {
            loop {
                row.mapv_inplace(|_| rng.random_range(-bound..bound));
                if row.iter().any(|&v| v != 0.0) {
                    break;
                }
            }
        }
        SeriesEmbedding { vectors }
    }

    pub fn n_series(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Pairwise cosine similarity of embedding rows.
pub fn cosine_similarity(v: ArrayView2<f64>) -> Result<Array2<f64>> {
    let norms: Vec<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Data(format!("embedding row {i} has zero or non-finite norm")));
    }
    let n = v.nrows();
    let gram = v.dot(&v.t());
    let mut sim = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sim[[i, j]] = if i == j {
                1.0
            } else {
                (gram[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(sim)
}

/// Sparse directed adjacency stored as sorted neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn to_dense(&self) -> Array2<u8> {
        let n = self.n();
        let mut a = Array2::zeros((n, n));
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                a[[i, j]] = 1;
            }
        }
        a
    }

    /// Every node connected to every node, self included.
    pub fn complete(n: usize) -> Self {
        Adjacency {
            neighbors: (0..n).map(|_| (0..n).collect()).collect(),
        }
    }
}

/// Indices of the `k` largest `scores[c]` over `candidates`, returned sorted
/// ascending. Ties prefer the lower index.
pub fn top_k(scores: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut ranked = candidates.to_vec();
    if ranked.len() > k {
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ranked.truncate(k);
    }
    ranked.sort_unstable();
    ranked
}

fn select(sim: &Array2<f64>, k: usize, candidates: impl Fn(usize) -> Vec<usize>) -> Adjacency {
    let neighbors = (0..sim.nrows())
        .map(|i| {
            let row = sim.row(i);
            let scores = row.as_slice().expect("similarity rows are contiguous");
            top_k(scores, &candidates(i), k)
        })
        .collect();
    Adjacency { neighbors }
}

/// TopK graph: row `i` keeps the `K` most similar series (self included).
pub fn build_adjacency(v: ArrayView2<f64>, k: usize) -> Result<Adjacency> {
    let sim = cosine_similarity(v)?;
    adjacency_from_similarity(&sim, k)
}

pub fn adjacency_from_similarity(sim: &Array2<f64>, k: usize) -> Result<Adjacency> {
    let n = sim.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k must lie in 1..={n}, got {k}")));
    }
    Ok(select(sim, k, |_| (0..n).collect()))
}

/// Intra- and inter-modal graphs. Candidate sets larger than `K` are cut
/// to their TopK by similarity; smaller ones are kept whole.
pub fn build_modal_adjacency(v: ArrayView2<f64>, modality: &[usize], k: usize) -> Result<(Adjacency, Adjacency)> {
    let sim = cosine_similarity(v)?;
    modal_adjacency_from_similarity(&sim, modality, k)
}

pub fn modal_adjacency_from_similarity(
    sim: &Array2<f64>,
    modality: &[usize],
    k: usize,
) -> Result<(Adjacency, Adjacency)> {
    let n = sim.nrows();
    if modality.len() != n {
        return Err(Error::Shape(format!(
            "{} modality ids for {n} embeddings",
            modality.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("top-k must be positive".into()));
    }
    let intra = select(sim, k, |i| (0..n).filter(|&j| modality[j] == modality[i]).collect());
    let inter = select(sim, k, |i| (0..n).filter(|&j| modality[j] != modality[i]).collect());
    Ok((intra, inter))
}

/// The three relations plus the similarity matrix they were cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTopology {
    pub topk: Adjacency,
    pub intra: Adjacency,
    pub inter: Adjacency,
    pub k: usize,
    pub similarity: Array2<f64>,
}

impl GraphTopology {
    /// Builds all relations from the current embeddings. `k` larger than
    /// the series count is clamped to it.
    pub fn build(v: ArrayView2<f64>, modality: &[usize], k: usize) -> Result<Self> {
        let k = k.min(v.nrows());
        let similarity = cosine_similarity(v)?;
        let topk = adjacency_from_similarity(&similarity, k)?;
        let (intra, inter) = modal_adjacency_from_similarity(&similarity, modality, k)?;
        Ok(GraphTopology {
            topk,
            intra,
            inter,
            k,
            similarity,
        })
    }

    pub fn n(&self) -> usize {
        self.topk.n()
    }

    /// Edge list `src,dst,relation,similarity` over all three relations.
    pub fn write_edge_list(&self, names: &[String], out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "src,dst,relation,similarity")?;
        for (label, adj) in [("topk", &self.topk), ("intra", &self.intra), ("inter", &self.inter)] {
            for (i, row) in adj.neighbors.iter().enumerate() {
                for &j in row {
                    writeln!(out, "{},{},{},{}", names[i], names[j], label, self.similarity[[i, j]])?;
                }
            }
        }
        Ok(())
    }

    pub fn export_edge_list(&self, names: &[String], path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_edge_list(names, &mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }
}
