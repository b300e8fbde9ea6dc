//! Node2Vec: second-order biased random walks fed to skip-gram with negative
//! sampling.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Adjacency, GraphDataset};
use crate::error::{Error, Result};
use crate::threads;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Node2VecConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    /// Return parameter.
    pub p: f64,
    /// In-out parameter.
    pub q: f64,
    pub negatives: usize,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
}

impl Default for Node2VecConfig {
    fn default() -> Self {
        Node2VecConfig {
            walks_per_node: 10,
            walk_length: 80,
            window: 10,
            p: 1.0,
            q: 1.0,
            negatives: 5,
            dim: 128,
            epochs: 5,
            lr: 0.025,
            min_lr: 1e-4,
        }
    }
}

impl Node2VecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("node2vec: {m}")));
        if !(self.p > 0.0 && self.q > 0.0) {
            return bad("p and q must be positive");
        }
        if self.walks_per_node == 0 || self.walk_length == 0 || self.window == 0 || self.epochs == 0 {
            return bad("walk counts, window and epochs must be positive");
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("need 0 <= min_lr <= lr and lr > 0");
        }
        Ok(())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unnormalised transition weights from `cur` (having arrived from `prev`).
pub fn transition_weights(adj: &Adjacency, prev: Option<usize>, cur: usize, p: f64, q: f64) -> Vec<f64> {
    adj.neighbors(cur)
        .iter()
        .map(|&x| {
            let x = x as usize;
            match prev {
                None => 1.0,
                Some(t) if x == t => 1.0 / p,
                Some(t) if adj.has_edge(t, x) => 1.0,
                Some(_) => 1.0 / q,
            }
        })
        .collect()
}

/// One biased walk of at most `length` nodes starting at `start`.
pub fn biased_walk<R: Rng + ?Sized>(
    adj: &Adjacency,
    start: usize,
    length: usize,
    p: f64,
    q: f64,
    rng: &mut R,
) -> Vec<u32> {
    let mut walk = vec![start as u32];
    let uniform = p == 1.0 && q == 1.0;
    while walk.len() < length {
        let cur = *walk.last().unwrap() as usize;
        let nb = adj.neighbors(cur);
        if nb.is_empty() {
            break;
        }
        let next = if uniform {
            nb[rng.random_range(0..nb.len())]
        } else {
            let prev = (walk.len() >= 2).then(|| walk[walk.len() - 2] as usize);
            let w = transition_weights(adj, prev, cur, p, q);
            nb[WeightedIndex::new(&w).expect("positive weights").sample(rng)]
        };
        walk.push(next);
    }
    walk
}

/// All walks, round by round; start nodes are shuffled within each round.
pub fn generate_walks(adj: &Adjacency, cfg: &Node2VecConfig, seed: u64) -> Vec<Vec<u32>> {
    let n = adj.num_nodes();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0, u64::MAX));
    let mut jobs = Vec::with_capacity(n * cfg.walks_per_node);
    for r in 0..cfg.walks_per_node {
        let mut starts: Vec<usize> = (0..n).collect();
        starts.shuffle(&mut order_rng);
        jobs.extend(starts.into_iter().map(|s| (r, s)));
    }
    let walk = |&(r, s): &(usize, usize)| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, r as u64 + 1, s as u64));
        biased_walk(adj, s, cfg.walk_length, cfg.p, cfg.q, &mut rng)
    };
    if threads::parallel() {
        jobs.par_iter().map(walk).collect()
    } else {
        jobs.iter().map(walk).collect()
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `grad += g·co` and `co += g·ci`.
#[inline]
fn accumulate(grad: &mut [f32], ci: &[f32], co: &mut [f32], g: f32) {
    let mut gc = grad.chunks_exact_mut(8);
    let mut cc = ci.chunks_exact(8);
    let mut oc = co.chunks_exact_mut(8);
    for ((gr, x), y) in (&mut gc).zip(&mut cc).zip(&mut oc) {
        for k in 0..8 {
            gr[k] += g * y[k];
            y[k] += g * x[k];
        }
    }
    for ((gr, &x), y) in gc
        .into_remainder()
        .iter_mut()
        .zip(cc.remainder())
        .zip(oc.into_remainder())
    {
        *gr += g * *y;
        *y += g * x;
    }
}

/// Skip-gram with negative sampling over `walks`; returns the input
/// (centre-word) embedding table.
pub fn skipgram(walks: &[Vec<u32>], num_nodes: usize, cfg: &Node2VecConfig, seed: u64) -> Array2<f32> {
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, 0));
    let mut input: Vec<f32> = (0..num_nodes * d)
        .map(|_| (rng.random::<f32>() - 0.5) / d as f32)
        .collect();
    let mut output = vec![0f32; num_nodes * d];

    let mut counts = vec![0f64; num_nodes];
    for w in walks {
        for &v in w {
            counts[v as usize] += 1.0;
        }
    }
    let noise: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let Ok(noise) = WeightedAliasIndex::new(noise) else {
        return Array2::from_shape_vec((num_nodes, d), input).unwrap();
    };

    let total_tokens = (walks.iter().map(Vec::len).sum::<usize>() * cfg.epochs).max(1) as f64;
    let mut seen = 0usize;
    let mut grad = vec![0f32; d];
    for _ in 0..cfg.epochs {
        for walk in walks {
            for (pos, &center) in walk.iter().enumerate() {
                let progress = seen as f64 / total_tokens;
                let lr = (cfg.lr - (cfg.lr - cfg.min_lr) * progress).max(cfg.min_lr) as f32;
                seen += 1;
                let reduced = rng.random_range(0..cfg.window);
                let span = cfg.window - reduced;
                let lo = pos.saturating_sub(span);
                let hi = (pos + span + 1).min(walk.len());
                let c = center as usize * d;
                for ctx_pos in (lo..hi).filter(|&x| x != pos) {
                    let context = walk[ctx_pos] as usize;
                    grad.fill(0.0);
                    for neg in 0..=cfg.negatives {
                        let (target, label) = if neg == 0 {
                            (context, 1.0f32)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let o = target * d;
                        let ci = &input[c..c + d];
                        let co = &mut output[o..o + d];
                        let g = (label - sigmoid(dot(ci, co))) * lr;
                        accumulate(&mut grad, ci, co, g);
                    }
                    for (x, g) in input[c..c + d].iter_mut().zip(&grad) {
                        *x += g;
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((num_nodes, d), input).unwrap()
}

pub fn node2vec_embed(g: &GraphDataset, cfg: &Node2VecConfig, seed: u64) -> Array2<f32> {
    let walks = generate_walks(g.adjacency(), cfg, seed);
    skipgram(&walks, g.num_nodes(), cfg, seed)
}
