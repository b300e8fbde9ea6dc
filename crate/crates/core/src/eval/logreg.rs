//! Multinomial logistic regression trained by full-batch gradient descent
//! with Barzilai-Borwein initial steps and Armijo backtracking.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegConfig {
    pub max_iter: usize,
    /// Stop when the gradient norm drops below this.
    pub tol: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            max_iter: 5000,
            tol: 1e-5,
        }
    }
}

/// Weights with the bias as the last row (`(d + 1) × C`).
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub weights: Array2<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn augment(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let d = x.ncols();
    let mut out = Array2::ones((rows.len(), d + 1));
    for (r, &i) in rows.iter().enumerate() {
        out.slice_mut(s![r, ..d]).assign(&x.row(i));
    }
    out
}

/// Row-wise softmax in place; returns `Σ_r log Σ_c exp(logit_rc)`.
fn softmax_rows(logits: &mut Array2<f64>) -> f64 {
    let mut lse_total = 0.0;
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
        lse_total += m + s.ln();
    }
    lse_total
}

struct Problem {
    x: Array2<f64>,
    y: Vec<usize>,
    l2: f64,
}

impl Problem {
    fn value(&self, w: &Array2<f64>) -> f64 {
        let mut logits = self.x.dot(w);
        let target: f64 = self.y.iter().enumerate().map(|(r, &c)| logits[[r, c]]).sum();
        let lse = softmax_rows(&mut logits);
        let n = self.x.nrows() as f64;
        (lse - target) / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &Array2<f64>) -> Array2<f64> {
        let mut p = self.x.dot(w);
        softmax_rows(&mut p);
        for (r, &c) in self.y.iter().enumerate() {
            p[[r, c]] -= 1.0;
        }
        let n = self.x.nrows() as f64;
        self.x.t().dot(&p) / n + w * self.l2
    }
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Minimises mean cross-entropy plus `l2·‖W‖²/2` (bias included) over `train`.
pub fn fit_logreg(
    x: &Array2<f64>,
    labels: &[usize],
    train: &[usize],
    num_classes: usize,
    l2: f64,
    cfg: &LogRegConfig,
) -> LogisticRegression {
    assert!(!train.is_empty(), "empty training set");
    let mut present = vec![false; num_classes];
    for &i in train {
        present[labels[i]] = true;
    }
    if let Some(c) = present.iter().position(|&p| !p) {
        log::warn!("class {c} has no training examples");
    }
    let problem = Problem {
        x: augment(x, train),
        y: train.iter().map(|&i| labels[i]).collect(),
        l2,
    };
    let mut w = Array2::<f64>::zeros((x.ncols() + 1, num_classes));
    let mut f = problem.value(&w);
    let mut g = problem.gradient(&w);
    let mut step = 1.0;
    let mut prev: Option<(Array2<f64>, Array2<f64>)> = None;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let gn = norm(&g);
        if gn < cfg.tol {
            break;
        }
        if let Some((w_prev, g_prev)) = &prev {
            let sv = &w - w_prev;
            let yv = &g - g_prev;
            let sy: f64 = (&sv * &yv).sum();
            if sy > 0.0 {
                step = ((&sv * &sv).sum() / sy).clamp(1e-10, 1e10);
            } else {
                step *= 2.0;
            }
        }
        let gg = gn * gn;
        let mut t = step;
        let mut candidate;
        let mut f_new;
        let mut tries = 0;
        loop {
            candidate = &w - &(&g * t);
            f_new = problem.value(&candidate);
            if f_new <= f - 1e-4 * t * gg || tries >= 60 {
                break;
            }
            t *= 0.5;
            tries += 1;
        }
        if !(f_new < f) {
            break;
        }
        let g_new = problem.gradient(&candidate);
        prev = Some((std::mem::replace(&mut w, candidate), std::mem::replace(&mut g, g_new)));
        f = f_new;
        step = t;
        iterations += 1;
    }
    LogisticRegression {
        weights: w,
        iterations,
        grad_norm: norm(&g),
    }
}

impl LogisticRegression {
    pub fn logits(&self, x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        augment(x, rows).dot(&self.weights)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Array2<f64>, rows: &[usize]) -> Vec<usize> {
        self.logits(x, rows)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn classify_accuracy(clf: &LogisticRegression, x: &Array2<f64>, rows: &[usize], labels: &[usize]) -> f64 {
    let pred = clf.predict(x, rows);
    let truth: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    super::metrics::accuracy(&pred, &truth)
}
