//! Downstream evaluation of frozen embeddings.

pub mod kmeans;
pub mod logreg;
pub mod metrics;

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::GraphView;
use crate::dataset::{random_split, GraphDataset};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};

pub use kmeans::{kmeans, KMeansResult};
pub use logreg::{classify_accuracy, fit_logreg, LogRegConfig, LogisticRegression};
pub use metrics::{accuracy, ari, nmi};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Classification,
    Clustering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of seeds; seed `s` uses split and k-means seed `s`.
    pub seeds: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    /// Candidate `l2` values; the best on the validation set is used.
    pub l2_grid: Vec<f64>,
    pub logreg: LogRegConfig,
    /// L2-normalise embedding rows first.
    pub normalize: bool,
    /// Cluster count; the class count when absent.
    pub clusters: Option<usize>,
    pub kmeans_max_iter: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: 5,
            split: [0.1, 0.1, 0.8],
            l2_grid: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            logreg: LogRegConfig::default(),
            normalize: true,
            clusters: None,
            kmeans_max_iter: kmeans::DEFAULT_MAX_ITER,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("eval.seeds must be at least 1".into()));
        }
        if self.l2_grid.is_empty() || self.l2_grid.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("eval.l2_grid needs non-negative values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MetricSummary {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        MetricSummary {
            name: name.into(),
            values,
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
    /// Selected `l2` per seed (classification only).
    pub selected_l2: Vec<f64>,
    pub seconds: Vec<f64>,
    pub checkpoint: Option<String>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Plain-text table of `metric  mean ± std  per-seed...`.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>18}   per-seed\n", "metric", "mean ± std");
        for m in &self.metrics {
            let per: Vec<String> = m.values.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!(
                "{:<10} {:>9.4} ± {:<6.4}   {}\n",
                m.name,
                m.mean,
                m.std,
                per.join(" ")
            ));
        }
        s
    }
}

/// `U^(L)` on the uncorrupted graph.
pub fn embed_clean(dataset: &GraphDataset, params: &EncoderParams<f32>) -> Result<Array2<f32>> {
    let view = GraphView::<f32>::clean(dataset);
    let mut layers = encode(&view, params)?;
    Ok(layers.pop().expect("at least the input layer"))
}

fn prepare(emb: &Array2<f32>, normalize: bool) -> Array2<f64> {
    let mut x = emb.mapv(|v| v as f64);
    if normalize {
        for mut row in x.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
    }
    x
}

/// Logistic-regression accuracy over `cfg.seeds` random splits.
pub fn evaluate_classification(
    emb: &Array2<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if emb.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            emb.nrows(),
            labels.len()
        )));
    }
    let x = prepare(emb, cfg.normalize);
    let fractions = (cfg.split[0], cfg.split[1], cfg.split[2]);
    let (mut acc, mut chosen, mut secs, mut seeds) = (vec![], vec![], vec![], vec![]);
    for seed in 0..cfg.seeds as u64 {
        let t = Instant::now();
        let split = random_split(x.nrows(), fractions, seed)?;
        let mut best: Option<(f64, f64)> = None;
        for &l2 in &cfg.l2_grid {
            let clf = fit_logreg(&x, labels, &split.train, num_classes, l2, &cfg.logreg);
            let val = classify_accuracy(&clf, &x, &split.val, labels);
            if best.is_none_or(|(b, _)| val > b) {
                best = Some((val, l2));
            }
        }
        let l2 = best.expect("non-empty grid").1;
        let clf = fit_logreg(&x, labels, &split.train, num_classes, l2, &cfg.logreg);
        acc.push(classify_accuracy(&clf, &x, &split.test, labels));
        chosen.push(l2);
        secs.push(t.elapsed().as_secs_f64());
        seeds.push(seed);
    }
    Ok(EvalReport {
        task: EvalTask::Classification,
        seeds,
        metrics: vec![MetricSummary::new("accuracy", acc)],
        selected_l2: chosen,
        seconds: secs,
        checkpoint: None,
    })
}

/// k-means NMI and ARI over `cfg.seeds` initialisations.
pub fn evaluate_clustering(
    emb: &Array2<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if emb.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            emb.nrows(),
            labels.len()
        )));
    }
    let x = prepare(emb, cfg.normalize);
    let k = cfg.clusters.unwrap_or(num_classes);
    let (mut nmis, mut aris, mut secs, mut seeds) = (vec![], vec![], vec![], vec![]);
    for seed in 0..cfg.seeds as u64 {
        let t = Instant::now();
        let r = kmeans(&x, k, seed, cfg.kmeans_max_iter)?;
        nmis.push(nmi(labels, &r.assignment));
        aris.push(ari(labels, &r.assignment));
        secs.push(t.elapsed().as_secs_f64());
        seeds.push(seed);
    }
    Ok(EvalReport {
        task: EvalTask::Clustering,
        seeds,
        metrics: vec![MetricSummary::new("nmi", nmis), MetricSummary::new("ari", aris)],
        selected_l2: vec![],
        seconds: secs,
        checkpoint: None,
    })
}
