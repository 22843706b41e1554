//! Builds the TopK, intra-modal and inter-modal relations from a set of
//! embeddings and prints them as adjacency matrices.
//!
//! cargo run --example graph_topology -- [k]

use mmad::graph::{Adjacency, GraphTopology, SeriesEmbedding};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(title: &str, adj: &Adjacency, modality: &[usize]) {
    println!("{title} ({} edges)", adj.edge_count());
    let dense = adj.to_dense();
    for (i, row) in dense.rows().into_iter().enumerate() {
        let cells: String = row.iter().map(|&v| if v == 1 { " #" } else { " ." }).collect();
        println!("  m{} s{i:<2}{cells}", modality[i]);
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let modality = [1, 1, 1, 1, 2, 2, 2, 3, 3, 3];
    let emb = SeriesEmbedding::init(modality.len(), 8, &mut ChaCha8Rng::seed_from_u64(1));
    let topo = GraphTopology::build(emb.vectors.view(), &modality, k)?;
    println!("k = {}", topo.k);
    show("TopK", &topo.topk, &modality);
    show("intra-modal", &topo.intra, &modality);
    show("inter-modal", &topo.inter, &modality);
    Ok(())
}
