//! Synthetic fixtures shared by the benchmarks.

use std::sync::Arc;

use muxgcl::dataset::{Adjacency, GraphDataset};
use muxgcl::pae::{AffinityMode, AffinityTable, PatchTopoEmbeddings, TopoBackend};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Erdős–Rényi-style graph with about `avg_degree` neighbours per node and
/// sparse binary features, roughly Cora-shaped for `n = 2708`.
pub fn random_graph(n: usize, avg_degree: usize, features: usize, classes: usize, seed: u64) -> GraphDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(usize, usize)> = (0..n * avg_degree / 2)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .filter(|(a, b)| a != b)
        .collect();
    let (adj, _) = Adjacency::from_edges(n, edges).expect("valid edges");
    let mut x = Array2::<f32>::zeros((n, features));
    for mut row in x.rows_mut() {
        for _ in 0..18 {
            row[rng.random_range(0..features)] = 1.0;
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    GraphDataset::new("synthetic", classes, adj, x, labels).expect("consistent dataset")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `L + 1` random contrast matrices.
pub fn random_stack(n: usize, num_layers: usize, dim: usize, seed: u64) -> Vec<Array2<f32>> {
    (0..=num_layers)
        .map(|k| random_matrix(n, dim, seed.wrapping_add(k as u64)))
        .collect()
}

/// Affinity table built from random unit patch embeddings.
pub fn random_affinity(n: usize, num_layers: usize, dim: usize, mode: AffinityMode, seed: u64) -> AffinityTable {
    let layers = random_stack(n, num_layers, dim, seed)
        .into_iter()
        .map(|mut m| {
            for mut r in m.rows_mut() {
                let norm = r.dot(&r).sqrt();
                r /= norm;
            }
            m
        })
        .collect();
    let h = PatchTopoEmbeddings::from_layers(layers, TopoBackend::Node2vec, seed).expect("valid layers");
    let floor = muxgcl::pae::default_omega_min(n);
    AffinityTable::materialize(Arc::new(h), mode, u64::MAX, floor).expect("within budget")
}
