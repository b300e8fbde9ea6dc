#![allow(dead_code)]

use muxgcl::dataset::{Adjacency, GraphDataset};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Graph with one-hot identity features and all labels 0.
pub fn graph(n: usize, edges: &[(usize, usize)]) -> GraphDataset {
    let (adj, _) = Adjacency::from_edges(n, edges.iter().copied()).unwrap();
    GraphDataset::new("test", 1, adj, Array2::eye(n), vec![0; n]).unwrap()
}

/// Random simple graph on `n` nodes with random dense features.
pub fn random_graph(n: usize, p: f64, features: usize, seed: u64) -> GraphDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    let (adj, _) = Adjacency::from_edges(n, edges).unwrap();
    let x = Array2::from_shape_fn((n, features), |_| rng.random_range(-1.0f32..1.0));
    GraphDataset::new("random", 1, adj, x, vec![0; n]).unwrap()
}

pub fn random_stack(n: usize, num_layers: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    (0..=num_layers)
        .map(|_| Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0)))
        .collect()
}

/// Connected-component id per node by union-find, independent of BFS.
pub fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

pub fn cosine(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}
