//! Diagnostics on trained contrast embeddings: cross-layer similarity
//! distributions and the `T_S` / `T_D` statistics.
//!
//! For a triple `(i, j ≠ i, k)`:
//!
//! ```text
//! ψ_S^{Lk} = θ(u_i^L, u_j^k) − θ(u_i^L, v_i^k)
//! ψ_D^{Lk} = θ(u_i^L, v_j^k) − θ(u_i^L, v_i^k)
//! T_S = ψ_S^{Lk} − ψ_S^{LL} + log ω_ij^{Lk},   T_D likewise
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::dataset::GraphDataset;
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::pae::{AffinityTable, OMEGA_BLOCK};
use crate::real::Real;

/// Upper bound on sampled pairs or triples.
pub const MAX_SAMPLES: usize = 1_000_000;

fn unit_rows<T: Real>(z: &Array2<T>) -> Result<Array2<f64>> {
    let mut out = z.mapv(|x| x.as_f64());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NonFinite(format!("contrast row {i} has norm {norm}")));
        }
        row /= norm;
    }
    Ok(out)
}

fn unit_stack<T: Real>(z: &[Array2<T>]) -> Result<Vec<Array2<f64>>> {
    z.iter().map(unit_rows).collect()
}

#[inline]
fn dot(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    a.row(i).dot(&b.row(j))
}

/// Density histogram over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
    pub count: usize,
}

impl Histogram {
    pub fn new(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("histogram of an empty sample".into()));
        }
        if bins == 0 || !(hi > lo) {
            return Err(Error::InvalidArgument("need bins > 0 and hi > lo".into()));
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in samples {
            let b = (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let total = samples.len() as f64;
        Ok(Histogram {
            edges: (0..=bins).map(|b| lo + b as f64 * width).collect(),
            density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
            count: samples.len(),
        })
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    /// `Σ density · width`; 1 for any non-empty sample.
    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.bin_width()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 1-Wasserstein distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let quantile = |v: &[f64], q: f64| v[((q * v.len() as f64) as usize).min(v.len() - 1)];
    let steps = a.len().max(b.len()).max(1);
    (0..steps)
        .map(|s| {
            let q = (s as f64 + 0.5) / steps as f64;
            (quantile(&a, q) - quantile(&b, q)).abs()
        })
        .sum::<f64>()
        / steps as f64
}

/// Positive and negative cosine distributions for one `(m, n)` layer pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub m: usize,
    pub n: usize,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl PairSimilarity {
    pub fn histograms(&self, bins: usize) -> Result<(Histogram, Histogram)> {
        Ok((
            Histogram::new(&self.positive, bins, -1.0, 1.0)?,
            Histogram::new(&self.negative, bins, -1.0, 1.0)?,
        ))
    }

    pub fn median_positive(&self) -> f64 {
        median(&self.positive)
    }

    pub fn median_negative(&self) -> f64 {
        median(&self.negative)
    }

    /// Wasserstein distance between the positive and negative distributions.
    pub fn separation(&self) -> f64 {
        wasserstein_1d(&self.positive, &self.negative)
    }
}

/// Cosines of `(u_i^(m), v_i^(n))` for all `i`, and of `negatives_per_node`
/// random `(u_i^(m), v_j^(n))`, `j ≠ i`, per node (capped at [`MAX_SAMPLES`]).
pub fn similarity_distributions<T: Real>(
    zu: &[Array2<T>],
    zv: &[Array2<T>],
    pairs: &[(usize, usize)],
    negatives_per_node: usize,
    seed: u64,
) -> Result<Vec<PairSimilarity>> {
    let (u, v) = (unit_stack(zu)?, unit_stack(zv)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len());
    for &(m, n) in pairs {
        if m >= u.len() || n >= v.len() {
            return Err(Error::InvalidArgument(format!("layer pair ({m}, {n}) out of range")));
        }
        let nodes = u[m].nrows();
        let positive: Vec<f64> = (0..nodes).map(|i| dot(&u[m], i, &v[n], i)).collect();
        let per_node = negatives_per_node.min(MAX_SAMPLES / nodes.max(1));
        let mut negative = Vec::with_capacity(nodes * per_node);
        if nodes > 1 {
            for i in 0..nodes {
                for _ in 0..per_node {
                    let mut j = rng.random_range(0..nodes - 1);
                    if j >= i {
                        j += 1;
                    }
                    negative.push(dot(&u[m], i, &v[n], j));
                }
            }
        }
        out.push(PairSimilarity {
            m,
            n,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// Method-of-moments normal fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub frac_positive: f64,
    /// `mean − 1.645·std`.
    pub lower_bound_95: f64,
}

impl GaussianFit {
    pub fn from_samples(x: &[f64]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("Gaussian fit of an empty sample".into()));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Ok(GaussianFit {
            mean,
            std,
            count: x.len(),
            frac_positive: x.iter().filter(|&&v| v > 0.0).count() as f64 / n,
            lower_bound_95: mean - 1.645 * std,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TStatSample {
    pub triples: Vec<Triple>,
    pub t_s: Vec<f64>,
    pub t_d: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TStatSnapshot {
    pub t_s: GaussianFit,
    pub t_d: GaussianFit,
}

impl TStatSample {
    pub fn fit(&self) -> Result<TStatSnapshot> {
        Ok(TStatSnapshot {
            t_s: GaussianFit::from_samples(&self.t_s)?,
            t_d: GaussianFit::from_samples(&self.t_d)?,
        })
    }
}

fn t_pair(u: &[Array2<f64>], v: &[Array2<f64>], t: Triple, omega: f64) -> (f64, f64) {
    let l = u.len() - 1;
    let Triple { i, j, k } = t;
    let pos_k = dot(&u[l], i, &v[k], i);
    let pos_l = dot(&u[l], i, &v[l], i);
    let psi_s_k = dot(&u[l], i, &u[k], j) - pos_k;
    let psi_s_l = dot(&u[l], i, &u[l], j) - pos_l;
    let psi_d_k = dot(&u[l], i, &v[k], j) - pos_k;
    let psi_d_l = dot(&u[l], i, &v[l], j) - pos_l;
    let log_w = omega.ln();
    (psi_s_k - psi_s_l + log_w, psi_d_k - psi_d_l + log_w)
}

fn weights_for(table: &AffinityTable, triples: &[Triple]) -> Vec<f64> {
    let mut by_block: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (idx, t) in triples.iter().enumerate() {
        by_block.entry((t.k, t.i / OMEGA_BLOCK)).or_default().push(idx);
    }
    let mut w = vec![1.0; triples.len()];
    for ((k, b), members) in by_block {
        let start = b * OMEGA_BLOCK;
        let rows = start..(start + OMEGA_BLOCK).min(table.num_nodes());
        if let Some(block) = table.block(k, rows) {
            for idx in members {
                let t = triples[idx];
                w[idx] = block[[t.i - start, t.j]] as f64;
            }
        }
    }
    w
}

/// `T_S` and `T_D` for explicit triples (any `k ≤ L`).
pub fn t_values<T: Real>(
    zu: &[Array2<T>],
    zv: &[Array2<T>],
    omega: &AffinityTable,
    triples: &[Triple],
) -> Result<TStatSample> {
    let (u, v) = (unit_stack(zu)?, unit_stack(zv)?);
    let l = u.len() - 1;
    let n = u[l].nrows();
    if omega.num_nodes() != n || omega.num_layers() != l || v.len() != u.len() {
        return Err(Error::Shape("embeddings do not match the affinity table".into()));
    }
    if let Some(t) = triples.iter().find(|t| t.i == t.j || t.i >= n || t.j >= n || t.k > l) {
        return Err(Error::InvalidArgument(format!("invalid triple {t:?}")));
    }
    let w = weights_for(omega, triples);
    let (t_s, t_d) = triples.iter().zip(&w).map(|(&t, &w)| t_pair(&u, &v, t, w)).unzip();
    Ok(TStatSample {
        triples: triples.to_vec(),
        t_s,
        t_d,
    })
}

/// Uniform random triples with `j ≠ i` and `k < L`.
pub fn sample_triples(num_nodes: usize, num_layers: usize, count: usize, seed: u64) -> Result<Vec<Triple>> {
    if num_layers == 0 || num_nodes < 2 {
        return Err(Error::InvalidArgument("T statistics need L ≥ 1 and N ≥ 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count.min(MAX_SAMPLES))
        .map(|_| {
            let i = rng.random_range(0..num_nodes);
            let mut j = rng.random_range(0..num_nodes - 1);
            if j >= i {
                j += 1;
            }
            Triple {
                i,
                j,
                k: rng.random_range(0..num_layers),
            }
        })
        .collect())
}

pub fn t_statistics<T: Real>(
    zu: &[Array2<T>],
    zv: &[Array2<T>],
    omega: &AffinityTable,
    count: usize,
    seed: u64,
) -> Result<(TStatSample, TStatSnapshot)> {
    let l = zu.len().saturating_sub(1);
    let n = zu.last().map_or(0, |z| z.nrows());
    let triples = sample_triples(n, l, count, seed)?;
    let sample = t_values(zu, zv, omega, &triples)?;
    let fit = sample.fit()?;
    Ok((sample, fit))
}

/// Contrast stacks `Z(0)..Z(L)` of two freshly augmented views.
pub fn view_embeddings(
    dataset: &GraphDataset,
    params: &EncoderParams<f32>,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<(Vec<Array2<f32>>, Vec<Array2<f32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v1, v2) = make_views::<f32, _>(dataset, augment, &mut rng);
    let a = forward(&v1, params)?.embeddings.contrast;
    let b = forward(&v2, params)?.embeddings.contrast;
    Ok((a, b))
}

/// All `(m, n)` pairs with `m, n ≤ num_layers`.
pub fn all_layer_pairs(num_layers: usize) -> Vec<(usize, usize)> {
    (0..=num_layers)
        .flat_map(|m| (0..=num_layers).map(move |n| (m, n)))
        .collect()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let wrap = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One CSV per layer pair: `bin_left,bin_right,positive_density,negative_density`.
pub fn export_similarity_csv(
    dists: &[PairSimilarity],
    bins: usize,
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    if dists.is_empty() {
        return Err(Error::InvalidArgument("no similarity distributions to export".into()));
    }
    let hists = dists.iter().map(|d| d.histograms(bins)).collect::<Result<Vec<_>>>()?;
    let mut paths = Vec::new();
    for (d, (pos, neg)) in dists.iter().zip(hists) {
        let path = dir.as_ref().join(format!("{prefix}similarity_m{}_n{}.csv", d.m, d.n));
        let rows: Vec<Vec<String>> = (0..bins)
            .map(|b| {
                vec![
                    pos.edges[b].to_string(),
                    pos.edges[b + 1].to_string(),
                    pos.density[b].to_string(),
                    neg.density[b].to_string(),
                ]
            })
            .collect();
        write_csv(
            &path,
            &["bin_left", "bin_right", "positive_density", "negative_density"],
            &rows,
        )?;
        paths.push(path);
    }
    Ok(paths)
}

/// `statistic,epoch,mean,std,count,frac_positive,lower_bound_95`.
pub fn export_fits_csv(fits: &[(usize, TStatSnapshot)], path: impl AsRef<Path>) -> Result<()> {
    if fits.is_empty() {
        return Err(Error::InvalidArgument("no T-statistic fits to export".into()));
    }
    let mut rows = Vec::new();
    for (epoch, snap) in fits {
        for (name, f) in [("T_S", snap.t_s), ("T_D", snap.t_d)] {
            rows.push(vec![
                name.to_string(),
                epoch.to_string(),
                f.mean.to_string(),
                f.std.to_string(),
                f.count.to_string(),
                f.frac_positive.to_string(),
                f.lower_bound_95.to_string(),
            ]);
        }
    }
    write_csv(
        path.as_ref(),
        &[
            "statistic",
            "epoch",
            "mean",
            "std",
            "count",
            "frac_positive",
            "lower_bound_95",
        ],
        &rows,
    )
}

/// Raw `T_S`, `T_D` values with their triples.
pub fn export_samples_csv(sample: &TStatSample, path: impl AsRef<Path>) -> Result<()> {
    if sample.triples.is_empty() {
        return Err(Error::InvalidArgument("no T-statistic samples to export".into()));
    }
    let rows: Vec<Vec<String>> = sample
        .triples
        .iter()
        .zip(sample.t_s.iter().zip(&sample.t_d))
        .map(|(t, (s, d))| {
            vec![
                t.i.to_string(),
                t.j.to_string(),
                t.k.to_string(),
                s.to_string(),
                d.to_string(),
            ]
        })
        .collect();
    write_csv(path.as_ref(), &["i", "j", "k", "t_s", "t_d"], &rows)
}

/// Reads a numeric CSV written by this module (header skipped, text columns
/// become NaN).
pub fn read_numeric_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        out.push(rec.iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect());
    }
    Ok(out)
}
