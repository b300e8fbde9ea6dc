//! Graph datasets: on-disk format, validation, adjacency normalisation,
//! random splits and k-hop ego-networks.
//!
//! A dataset directory holds four UTF-8, tab-separated files:
//!
//! * `meta.json`: `{"num_nodes": N, "num_features": F, "num_classes": C, "name": "..."}`
//! * `edges.tsv`: `u<TAB>v` per line, 0-based; symmetrised and deduplicated on load
//! * `features.tsv`: sparse `node<TAB>feature<TAB>value` triplets, absent entries are 0
//! * `labels.tsv`: `node<TAB>label`, every node exactly once

use std::collections::VecDeque;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::CsrMatrix;

/// Undirected, unweighted adjacency pattern.
///
/// Stored row-compressed with strictly increasing neighbour lists. Every edge
/// is present in both directions and self-loops are never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    indptr: Vec<usize>,
    indices: Vec<u32>,
}

impl Adjacency {
    /// Builds the symmetric closure of `edges`. Duplicates collapse, self-loops
    /// are dropped and counted in the second return value.
    pub fn from_edges<I>(num_nodes: usize, edges: I) -> Result<(Self, usize)>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); num_nodes];
        let mut self_loops = 0;
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Dataset(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                self_loops += 1;
                continue;
            }
            lists[u].push(v as u32);
            lists[v].push(u as u32);
        }
        let mut indptr = Vec::with_capacity(num_nodes + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            indices.extend_from_slice(&l);
            indptr.push(indices.len());
        }
        Ok((Adjacency { indptr, indices }, self_loops))
    }

    pub fn num_nodes(&self) -> usize {
        self.indptr.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&(v as u32)).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .map(|&v| v as usize)
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
    pub fn normalized<T: Real>(&self) -> NormalizedAdjacency<T> {
        let n = self.num_nodes();
        let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((self.degree(i) + 1) as f64).sqrt()).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(self.indices.len() + n);
        let mut values = Vec::with_capacity(self.indices.len() + n);
        indptr.push(0);
        for i in 0..n {
            let nb = self.neighbors(i);
            let split = nb.partition_point(|&j| (j as usize) < i);
            let cols = nb[..split]
                .iter()
                .copied()
                .chain(std::iter::once(i as u32))
                .chain(nb[split..].iter().copied());
            for j in cols {
                indices.push(j);
                values.push(T::lit(inv_sqrt[i] * inv_sqrt[j as usize]));
            }
            indptr.push(indices.len());
        }
        NormalizedAdjacency(CsrMatrix::from_parts(n, n, indptr, indices, values))
    }
}

/// Symmetrically normalised adjacency with self-loops, `Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency<T>(CsrMatrix<T>);

impl<T: Real> NormalizedAdjacency<T> {
    pub fn matrix(&self) -> &CsrMatrix<T> {
        &self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    #[serde(default)]
    name: String,
}

/// Immutable attributed graph with node labels.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    name: String,
    num_classes: usize,
    adjacency: Adjacency,
    features: Array2<f32>,
    labels: Vec<usize>,
}

impl GraphDataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        adjacency: Adjacency,
        features: Array2<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = adjacency.num_nodes();
        if features.nrows() != n || labels.len() != n {
            return Err(Error::Dataset(format!(
                "{n} nodes but {} feature rows and {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some((node, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "node {node} has label {l}, expected < {num_classes}"
            )));
        }
        if let Some(((r, c), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Dataset(format!("feature ({r}, {c}) = {v} is not finite")));
        }
        Ok(GraphDataset {
            name: name.into(),
            num_classes,
            adjacency,
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copy with every non-zero feature row scaled to unit sum.
    pub fn with_row_normalized_features(&self) -> GraphDataset {
        let mut g = self.clone();
        for mut row in g.features.rows_mut() {
            let s: f32 = row.sum();
            if s != 0.0 {
                row /= s;
            }
        }
        g
    }
}

pub fn normalize_adjacency<T: Real>(g: &GraphDataset) -> NormalizedAdjacency<T> {
    g.adjacency().normalized()
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Iterates `(1-based line number, fields)` over non-blank lines.
fn tsv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split_whitespace().collect()))
}

fn parse_field<F: std::str::FromStr>(path: &Path, line: usize, s: &str, what: &str) -> Result<F> {
    s.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse {what} from {s:?}"),
    })
}

fn parse_error(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read(&meta_path)?).map_err(|e| Error::Format {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?;
    let (n, f, c) = (meta.num_nodes, meta.num_features, meta.num_classes);

    let edges_path = dir.join("edges.tsv");
    let text = read(&edges_path)?;
    let mut edges = Vec::new();
    for (line, fields) in tsv_rows(&text) {
        if fields.len() != 2 {
            return Err(parse_error(&edges_path, line, "expected 2 fields".into()));
        }
        let u: usize = parse_field(&edges_path, line, fields[0], "node index")?;
        let v: usize = parse_field(&edges_path, line, fields[1], "node index")?;
        if u >= n || v >= n {
            return Err(parse_error(
                &edges_path,
                line,
                format!("node index {} >= num_nodes {n}", u.max(v)),
            ));
        }
        edges.push((u, v));
    }
    let (adjacency, self_loops) = Adjacency::from_edges(n, edges)?;
    if self_loops > 0 {
        warn!("{}: dropped {self_loops} self-loops", edges_path.display());
    }

    let feat_path = dir.join("features.tsv");
    let text = read(&feat_path)?;
    let mut features = Array2::<f32>::zeros((n, f));
    for (line, fields) in tsv_rows(&text) {
        if fields.len() != 3 {
            return Err(parse_error(&feat_path, line, "expected 3 fields".into()));
        }
        let node: usize = parse_field(&feat_path, line, fields[0], "node index")?;
        let col: usize = parse_field(&feat_path, line, fields[1], "feature index")?;
        let value: f32 = parse_field(&feat_path, line, fields[2], "feature value")?;
        if node >= n {
            return Err(parse_error(
                &feat_path,
                line,
                format!("node index {node} >= num_nodes {n}"),
            ));
        }
        if col >= f {
            return Err(parse_error(
                &feat_path,
                line,
                format!("feature index {col} >= num_features {f}"),
            ));
        }
        if !value.is_finite() {
            return Err(parse_error(
                &feat_path,
                line,
                format!("non-finite feature value {value}"),
            ));
        }
        features[[node, col]] = value;
    }

    let label_path = dir.join("labels.tsv");
    let text = read(&label_path)?;
    let mut labels = vec![None; n];
    for (line, fields) in tsv_rows(&text) {
        if fields.len() != 2 {
            return Err(parse_error(&label_path, line, "expected 2 fields".into()));
        }
        let node: usize = parse_field(&label_path, line, fields[0], "node index")?;
        let label: usize = parse_field(&label_path, line, fields[1], "label")?;
        if node >= n {
            return Err(parse_error(
                &label_path,
                line,
                format!("node index {node} >= num_nodes {n}"),
            ));
        }
        if label >= c {
            return Err(parse_error(
                &label_path,
                line,
                format!("label {label} >= num_classes {c}"),
            ));
        }
        if labels[node].replace(label).is_some() {
            return Err(parse_error(&label_path, line, format!("node {node} labelled twice")));
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&i| labels[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: {} nodes have no label (first: {})",
            label_path.display(),
            missing.len(),
            missing[0]
        )));
    }
    let labels = labels.into_iter().map(Option::unwrap).collect();
    GraphDataset::new(meta.name, c, adjacency, features, labels)
}

/// Writes `g` in the directory format read by [`load_dataset`].
pub fn save_dataset(g: &GraphDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let create = |name: &str| -> Result<(PathBuf, BufWriter<fs::File>)> {
        let p = dir.join(name);
        let f = fs::File::create(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
        Ok((p, BufWriter::new(f)))
    };
    let wrap = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(format!("writing {}", p.display()), e)
    };

    let meta = Meta {
        num_nodes: g.num_nodes(),
        num_features: g.num_features(),
        num_classes: g.num_classes(),
        name: g.name().to_string(),
    };
    let (p, mut w) = create("meta.json")?;
    let json = serde_json::to_string(&meta).expect("meta serialises");
    writeln!(w, "{json}").map_err(wrap(&p))?;
    w.flush().map_err(wrap(&p))?;

    let (p, mut w) = create("edges.tsv")?;
    for (u, v) in g.adjacency().edges() {
        writeln!(w, "{u}\t{v}").map_err(wrap(&p))?;
    }
    w.flush().map_err(wrap(&p))?;

    let (p, mut w) = create("features.tsv")?;
    for ((r, c), &v) in g.features().indexed_iter() {
        if v != 0.0 {
            // `{}` on f32 prints the shortest string that parses back exactly.
            writeln!(w, "{r}\t{c}\t{v}").map_err(wrap(&p))?;
        }
    }
    w.flush().map_err(wrap(&p))?;

    let (p, mut w) = create("labels.tsv")?;
    for (i, l) in g.labels().iter().enumerate() {
        writeln!(w, "{i}\t{l}").map_err(wrap(&p))?;
    }
    w.flush().map_err(wrap(&p))?;
    Ok(())
}

/// Disjoint train/validation/test node sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Uniformly random split. Train and validation sizes are floored, the
/// remainder goes to test.
pub fn random_split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("cannot split {n} nodes three ways")));
    }
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n_train = (n as f64 * ft).floor() as usize;
    let n_val = (n as f64 * fv).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "fractions {fractions:?} leave an empty set for {n} nodes"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = perm.split_off(n_train + n_val);
    let val = perm.split_off(n_train);
    Ok(Split {
        train: perm,
        val,
        test,
        seed,
    })
}

/// Nodes within `max_depth` hops of `source` with their distances, in BFS order.
pub fn bfs_within(adj: &Adjacency, source: usize, max_depth: usize) -> Vec<(usize, usize)> {
    let mut dist = vec![usize::MAX; adj.num_nodes()];
    let mut order = vec![(source, 0)];
    let mut queue = VecDeque::from([source]);
    dist[source] = 0;
    while let Some(u) = queue.pop_front() {
        let d = dist[u];
        if d == max_depth {
            continue;
        }
        for &v in adj.neighbors(u) {
            let v = v as usize;
            if dist[v] == usize::MAX {
                dist[v] = d + 1;
                order.push((v, d + 1));
                queue.push_back(v);
            }
        }
    }
    order
}

/// The `k`-hop ego-network of `i` (including `i`), sorted.
pub fn khop_egonet(g: &GraphDataset, i: usize, k: usize) -> Vec<usize> {
    let mut nodes: Vec<usize> = bfs_within(g.adjacency(), i, k).into_iter().map(|(v, _)| v).collect();
    nodes.sort_unstable();
    nodes
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn graph(n: usize, edges: &[(usize, usize)]) -> GraphDataset {
        let (adj, _) = Adjacency::from_edges(n, edges.iter().copied()).unwrap();
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i + j) as f32);
        GraphDataset::new("test", 1, adj, features, vec![0; n]).unwrap()
    }

    pub fn triangle() -> GraphDataset {
        graph(3, &[(0, 1), (1, 2), (0, 2)])
    }
}
