use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, CowArray, Ix2};
use serde::{Deserialize, Serialize};

use super::PatchTopoEmbeddings;
use crate::error::{Error, Result};

/// Row-block height used when computing ω. Loss evaluation requests blocks
/// on this grid so that lazy and precomputed tables agree bit for bit.
pub const OMEGA_BLOCK: usize = 256;

/// `max(1e-2, 2/N)`.
pub fn default_omega_min(num_nodes: usize) -> f64 {
    (2.0 / num_nodes.max(1) as f64).max(1e-2)
}

/// `ω = max(ω_min, 1 − clamp(cos, 0, 1))` for unit vectors with inner product `cos`.
#[inline]
pub fn omega(cos: f32, omega_min: f32) -> f32 {
    let eta = cos.clamp(0.0, 1.0);
    (1.0 - eta).max(omega_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityMode {
    /// Precompute when it fits the memory budget, otherwise lazy.
    Auto,
    Precompute,
    Lazy,
}

#[derive(Debug, Clone)]
enum Storage {
    Uniform,
    Dense(Vec<Array2<f32>>),
    Lazy(Arc<PatchTopoEmbeddings>),
}

/// Soft-negative weights `ω_ij^{Lk}` for k = 0..L.
#[derive(Debug, Clone)]
pub struct AffinityTable {
    num_nodes: usize,
    num_layers: usize,
    omega_min: f32,
    storage: Storage,
}

fn compute_block(h: &PatchTopoEmbeddings, k: usize, rows: Range<usize>, omega_min: f32) -> Array2<f32> {
    let anchors = h.layer(h.num_layers()).slice(s![rows, ..]);
    let mut w = anchors.dot(&h.layer(k).t());
    w.mapv_inplace(|c| omega(c, omega_min));
    w
}

impl AffinityTable {
    /// `ω ≡ 1`.
    pub fn uniform(num_nodes: usize, num_layers: usize) -> Self {
        AffinityTable {
            num_nodes,
            num_layers,
            omega_min: 1.0,
            storage: Storage::Uniform,
        }
    }

    /// Bytes needed to precompute all `L + 1` matrices.
    pub fn dense_bytes(num_nodes: usize, num_layers: usize) -> u64 {
        (num_layers as u64 + 1) * (num_nodes as u64).pow(2) * 4
    }

    pub fn materialize(
        h: Arc<PatchTopoEmbeddings>,
        mode: AffinityMode,
        budget_bytes: u64,
        omega_min: f64,
    ) -> Result<Self> {
        if !(omega_min > 0.0 && omega_min <= 1.0) {
            return Err(Error::Config(format!("omega floor {omega_min} outside (0, 1]")));
        }
        let n = h.num_nodes();
        let l = h.num_layers();
        let needed = Self::dense_bytes(n, l);
        let precompute = match mode {
            AffinityMode::Precompute if needed > budget_bytes => {
                return Err(Error::OverBudget {
                    needed,
                    budget: budget_bytes,
                })
            }
            AffinityMode::Precompute => true,
            AffinityMode::Lazy => false,
            AffinityMode::Auto => needed <= budget_bytes,
        };
        let omega_min = omega_min as f32;
        let storage = if precompute {
            let tables = (0..=l)
                .map(|k| {
                    let mut m = Array2::zeros((n, n));
                    for start in (0..n).step_by(OMEGA_BLOCK) {
                        let rows = start..(start + OMEGA_BLOCK).min(n);
                        let block = compute_block(&h, k, rows.clone(), omega_min);
                        m.slice_mut(s![rows, ..]).assign(&block);
                    }
                    m
                })
                .collect();
            Storage::Dense(tables)
        } else {
            Storage::Lazy(h)
        };
        Ok(AffinityTable {
            num_nodes: n,
            num_layers: l,
            omega_min,
            storage,
        })
    }

    /// Explicit tables `ω^{L0} .. ω^{LL}`; off-diagonal entries must lie in
    /// `[omega_min, 1]`.
    pub fn from_dense(tables: Vec<Array2<f32>>, omega_min: f64) -> Result<Self> {
        let n = tables.first().map_or(0, |t| t.nrows());
        if tables.is_empty() || tables.iter().any(|t| t.dim() != (n, n)) {
            return Err(Error::Shape(
                "affinity tables must be non-empty, square and equal-sized".into(),
            ));
        }
        let lo = omega_min as f32;
        for (k, t) in tables.iter().enumerate() {
            if let Some(((i, j), w)) = t.indexed_iter().find(|((i, j), &w)| i != j && !(lo..=1.0).contains(&w)) {
                return Err(Error::InvalidArgument(format!(
                    "ω[{k}][{i}, {j}] = {w} outside [{lo}, 1]"
                )));
            }
        }
        Ok(AffinityTable {
            num_nodes: n,
            num_layers: tables.len() - 1,
            omega_min: lo,
            storage: Storage::Dense(tables),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn omega_min(&self) -> f32 {
        self.omega_min
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.storage, Storage::Uniform)
    }

    pub fn is_precomputed(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// `ω_ij^{Lk}`; undefined for the positive pair `i == j`.
    pub fn weight(&self, i: usize, j: usize, k: usize) -> Result<f32> {
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "no weight for positive pair ({i}, {i})"
            )));
        }
        if i >= self.num_nodes || j >= self.num_nodes || k > self.num_layers {
            return Err(Error::InvalidArgument(format!("weight ({i}, {j}, {k}) out of range")));
        }
        Ok(match &self.storage {
            Storage::Uniform => 1.0,
            Storage::Dense(t) => t[k][[i, j]],
            Storage::Lazy(h) => {
                let start = i - i % OMEGA_BLOCK;
                let rows = start..(start + OMEGA_BLOCK).min(self.num_nodes);
                compute_block(h, k, rows, self.omega_min)[[i - start, j]]
            }
        })
    }

    /// Rows `rows` of `ω^{Lk}` (diagonal entries are meaningless), or `None`
    /// when `ω ≡ 1`. `rows.start` must lie on the [`OMEGA_BLOCK`] grid and the
    /// block must not cross it.
    pub fn block(&self, k: usize, rows: Range<usize>) -> Option<CowArray<'_, f32, Ix2>> {
        assert!(rows.start % OMEGA_BLOCK == 0 && rows.len() <= OMEGA_BLOCK);
        assert!(rows.end <= self.num_nodes && k <= self.num_layers);
        match &self.storage {
            Storage::Uniform => None,
            Storage::Dense(t) => {
                let view: ArrayView2<'_, f32> = t[k].slice(s![rows, ..]);
                Some(view.into())
            }
            Storage::Lazy(h) => Some(compute_block(h, k, rows, self.omega_min).into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::TopoBackend;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_h(n: usize, l: usize, d: usize, seed: u64) -> PatchTopoEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..=l)
            .map(|_| {
                let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0));
                for mut r in m.rows_mut() {
                    let norm = r.dot(&r).sqrt();
                    r /= norm;
                }
                m
            })
            .collect();
        PatchTopoEmbeddings::from_layers(layers, TopoBackend::Node2vec, seed).unwrap()
    }

    #[test]
    fn omega_rule() {
        assert_eq!(omega(1.0, 0.01), 0.01);
        assert_eq!(omega(0.0, 0.01), 1.0);
        assert_eq!(omega(-0.5, 0.01), 1.0);
        assert!((omega(0.25, 0.01) - 0.75).abs() < 1e-7);
    }

    #[test]
    fn default_floor() {
        assert_eq!(default_omega_min(2708), 0.01);
        assert_eq!(default_omega_min(100), 0.02);
    }

    #[test]
    fn precompute_matches_lazy() {
        let h = Arc::new(random_h(300, 2, 8, 3));
        let dense = AffinityTable::materialize(h.clone(), AffinityMode::Precompute, 1 << 30, 0.02).unwrap();
        let lazy = AffinityTable::materialize(h, AffinityMode::Lazy, 1 << 30, 0.02).unwrap();
        assert!(dense.is_precomputed() && !lazy.is_precomputed());
        for k in 0..=2 {
            for start in [0, 256] {
                let rows = start..(start + OMEGA_BLOCK).min(300);
                assert_eq!(dense.block(k, rows.clone()).unwrap(), lazy.block(k, rows).unwrap());
            }
        }
        assert_eq!(dense.weight(5, 299, 1).unwrap(), lazy.weight(5, 299, 1).unwrap());
    }

    #[test]
    fn auto_mode_and_budget() {
        let h = Arc::new(random_h(100, 2, 4, 1));
        let t = AffinityTable::materialize(h.clone(), AffinityMode::Auto, 1 << 30, 0.02).unwrap();
        assert!(t.is_precomputed());
        assert_eq!(AffinityTable::dense_bytes(100, 2), 120_000);
        let t = AffinityTable::materialize(h.clone(), AffinityMode::Auto, 1000, 0.02).unwrap();
        assert!(!t.is_precomputed());
        assert!(matches!(
            AffinityTable::materialize(h, AffinityMode::Precompute, 1000, 0.02),
            Err(Error::OverBudget { .. })
        ));
        assert_eq!(AffinityTable::dense_bytes(2708, 2), 87_999_168);
    }

    #[test]
    fn weights_within_bounds() {
        let h = Arc::new(random_h(50, 2, 3, 9));
        let t = AffinityTable::materialize(h, AffinityMode::Precompute, 1 << 30, 0.04).unwrap();
        for k in 0..=2 {
            for i in 0..50 {
                for j in (0..50).filter(|&j| j != i) {
                    let w = t.weight(i, j, k).unwrap();
                    assert!((0.04..=1.0).contains(&w));
                }
            }
        }
        assert!(t.weight(3, 3, 0).is_err());
    }
}
