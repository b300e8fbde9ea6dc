//! Patch affinity estimation.
//!
//! Topological node embeddings from Node2Vec or a VGAE are mean-pooled over
//! every `k`-hop ego-network and L2-normalised, giving `h_i^(k)`. The weight of
//! a negative pair is `ω = max(ω_min, 1 − clamp(⟨h_i^(L), h_j^(k)⟩, 0, 1))`.

mod affinity;
pub mod node2vec;
pub mod vgae;

use std::cell::Cell;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{bfs_within, GraphDataset};
use crate::error::{Error, Result};
use crate::threads;

pub use affinity::{default_omega_min, omega, AffinityMode, AffinityTable, OMEGA_BLOCK};
pub use node2vec::Node2VecConfig;
pub use vgae::VgaeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopoBackend {
    Node2vec,
    Vgae,
}

impl TopoBackend {
    fn id(self) -> u32 {
        match self {
            TopoBackend::Node2vec => 1,
            TopoBackend::Vgae => 2,
        }
    }
}

/// Which topological embedding to compute and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopoConfig {
    pub backend: TopoBackend,
    pub node2vec: Node2VecConfig,
    pub vgae: VgaeConfig,
}

impl Default for TopoConfig {
    fn default() -> Self {
        TopoConfig {
            backend: TopoBackend::Node2vec,
            node2vec: Node2VecConfig::default(),
            vgae: VgaeConfig::default(),
        }
    }
}

impl TopoConfig {
    /// Embedding width `d_t` of the selected backend.
    pub fn dim(&self) -> usize {
        match self.backend {
            TopoBackend::Node2vec => self.node2vec.dim,
            TopoBackend::Vgae => self.vgae.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() < 2 {
            return Err(Error::Config(format!("topological width {} < 2", self.dim())));
        }
        match self.backend {
            TopoBackend::Node2vec => self.node2vec.validate(),
            TopoBackend::Vgae => self.vgae.validate(),
        }
    }
}

/// Pooled, unit-norm patch embeddings `h_i^(k)` for k = 0..L.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTopoEmbeddings {
    layers: Vec<Array2<f32>>,
    backend: TopoBackend,
    seed: u64,
}

impl PatchTopoEmbeddings {
    /// `layers[k]` is the `N × d_t` matrix of `h^(k)` rows; all must be unit-norm.
    pub fn from_layers(layers: Vec<Array2<f32>>, backend: TopoBackend, seed: u64) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Shape("no patch layers".into()));
        };
        let dim = first.dim();
        if layers.iter().any(|l| l.dim() != dim) {
            return Err(Error::Shape("patch layers differ in shape".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            for (i, row) in l.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::NonFinite(format!("patch embedding h_{i}^({k}) has norm {norm}")));
                }
            }
        }
        Ok(PatchTopoEmbeddings { layers, backend, seed })
    }

    pub fn num_nodes(&self) -> usize {
        self.layers[0].nrows()
    }

    /// Deepest hop `L`.
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn backend(&self) -> TopoBackend {
        self.backend
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer(&self, k: usize) -> &Array2<f32> {
        &self.layers[k]
    }

    pub fn get(&self, i: usize, k: usize) -> ArrayView1<'_, f32> {
        self.layers[k].row(i)
    }
}

thread_local! {
    static INVOCATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`compute_patch_embeddings`] calls made on this thread.
pub fn invocations() -> usize {
    INVOCATIONS.with(|c| c.get())
}

/// Runs the configured backend and pools over `0..=num_layers` hops.
pub fn compute_patch_embeddings(
    g: &GraphDataset,
    cfg: &TopoConfig,
    num_layers: usize,
    seed: u64,
) -> Result<PatchTopoEmbeddings> {
    INVOCATIONS.with(|c| c.set(c.get() + 1));
    cfg.validate()?;
    let base = match cfg.backend {
        TopoBackend::Node2vec => node2vec::node2vec_embed(g, &cfg.node2vec, seed),
        TopoBackend::Vgae => vgae::vgae_embed(g, &cfg.vgae, seed)?,
    };
    pool_patches(&base, g, num_layers, cfg.backend, seed)
}

fn normalize_into(sum: &[f64], out: &mut [f32]) {
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (o, s) in out.iter_mut().zip(sum) {
            *o = (s / norm) as f32;
        }
    } else {
        // A zero mean has no direction; any fixed unit vector keeps ω defined.
        out.fill(0.0);
        out[0] = 1.0;
    }
}

/// `h_i^(k)` = L2-normalised mean of `base` rows over the `k`-hop ego-net of `i`.
pub fn pool_patches(
    base: &Array2<f32>,
    g: &GraphDataset,
    num_layers: usize,
    backend: TopoBackend,
    seed: u64,
) -> Result<PatchTopoEmbeddings> {
    let n = g.num_nodes();
    if base.nrows() != n {
        return Err(Error::Shape(format!(
            "base embeddings have {} rows for {n} nodes",
            base.nrows()
        )));
    }
    let d = base.ncols();
    let pool_row = |i: usize| -> Vec<f32> {
        let mut out = vec![0f32; (num_layers + 1) * d];
        let mut sum = vec![0f64; d];
        let mut count = 0usize;
        let nodes = bfs_within(g.adjacency(), i, num_layers);
        let mut idx = 0;
        for k in 0..=num_layers {
            while idx < nodes.len() && nodes[idx].1 == k {
                for (s, &x) in sum.iter_mut().zip(base.row(nodes[idx].0)) {
                    *s += x as f64;
                }
                count += 1;
                idx += 1;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            normalize_into(&mean, &mut out[k * d..(k + 1) * d]);
        }
        out
    };
    let rows: Vec<Vec<f32>> = if threads::parallel() {
        (0..n).into_par_iter().map(pool_row).collect()
    } else {
        (0..n).map(pool_row).collect()
    };
    let layers = (0..=num_layers)
        .map(|k| Array2::from_shape_fn((n, d), |(i, c)| rows[i][k * d + c]))
        .collect();
    PatchTopoEmbeddings::from_layers(layers, backend, seed)
}

const CACHE_MAGIC: &[u8; 8] = b"MXGCLPAE";

/// Writes `H` with header `{N, L, d_t, backend-id, seed}`; data is `f32`
/// little-endian in `[i][k][c]` order.
pub fn save_cache(h: &PatchTopoEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let wrap = |e| Error::io(format!("writing {}", path.display()), e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(wrap)?);
    let mut buf = Vec::with_capacity(40 + h.num_nodes() * (h.num_layers() + 1) * h.dim() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(h.num_nodes() as u64).to_le_bytes());
    buf.extend_from_slice(&(h.num_layers() as u32).to_le_bytes());
    buf.extend_from_slice(&(h.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&h.backend.id().to_le_bytes());
    buf.extend_from_slice(&h.seed.to_le_bytes());
    for i in 0..h.num_nodes() {
        for k in 0..=h.num_layers() {
            for &x in h.get(i, k) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    w.write_all(&buf).map_err(wrap)?;
    w.flush().map_err(wrap)
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<PatchTopoEmbeddings> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 36 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a patch-embedding cache".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let n = u64_at(8) as usize;
    let l = u32_at(16) as usize;
    let d = u32_at(20) as usize;
    let backend = match u32_at(24) {
        1 => TopoBackend::Node2vec,
        2 => TopoBackend::Vgae,
        other => return Err(bad(format!("unknown backend id {other}"))),
    };
    let seed = u64_at(28);
    let expected = 36 + n * (l + 1) * d * 4;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data = &bytes[36..];
    let at = |i: usize, k: usize, c: usize| {
        let o = ((i * (l + 1) + k) * d + c) * 4;
        f32::from_le_bytes(data[o..o + 4].try_into().unwrap())
    };
    let layers = (0..=l)
        .map(|k| Array2::from_shape_fn((n, d), |(i, c)| at(i, k, c)))
        .collect();
    PatchTopoEmbeddings::from_layers(layers, backend, seed)
}

/// Loads `path` if it matches `(g, cfg, L, seed)`, otherwise computes and
/// writes it.
pub fn cached_patch_embeddings(
    g: &GraphDataset,
    cfg: &TopoConfig,
    num_layers: usize,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<PatchTopoEmbeddings> {
    let path = path.as_ref();
    if path.exists() {
        let h = load_cache(path)?;
        if h.num_nodes() == g.num_nodes()
            && h.num_layers() == num_layers
            && h.dim() == cfg.dim()
            && h.backend() == cfg.backend
            && h.seed() == seed
        {
            return Ok(h);
        }
        log::warn!("{} does not match the requested setup, recomputing", path.display());
    }
    let h = compute_patch_embeddings(g, cfg, num_layers, seed)?;
    save_cache(&h, path)?;
    Ok(h)
}
