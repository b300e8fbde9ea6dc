//! Variational graph auto-encoder with an inner-product decoder.
//!
//! ```text
//! H   = relu(Ã X W0)
//! μ   = Ã H Wμ,   log σ² = Ã H Wσ
//! z   = μ + ε ⊙ exp(log σ² / 2)
//! J   = norm · mean_ij wBCE(z_i·z_j, (A+I)_ij) + KL / N
//! ```
//! with positive-class weight `(N² − |E|)/|E|`, `norm = N² / (2(N² − |E|))`
//! and `KL = mean_i KL(q_i ‖ N(0, I))`.

use ndarray::{Array2, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{GraphDataset, NormalizedAdjacency};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VgaeConfig {
    pub hidden: usize,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for VgaeConfig {
    fn default() -> Self {
        VgaeConfig {
            hidden: 64,
            dim: 32,
            epochs: 300,
            lr: 0.01,
        }
    }
}

impl VgaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("vgae: hidden, epochs and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VgaeParams<T> {
    pub w0: Array2<T>,
    pub w_mu: Array2<T>,
    pub w_logvar: Array2<T>,
}

impl<T: Real> VgaeParams<T> {
    pub fn init(num_features: usize, hidden: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |r: usize, c: usize| {
            let b = (6.0 / (r + c) as f64).sqrt();
            let u = Uniform::new_inclusive(-b, b).expect("finite bound");
            Array2::from_shape_fn((r, c), |_| T::lit(u.sample(&mut rng)))
        };
        VgaeParams {
            w0: glorot(num_features, hidden),
            w_mu: glorot(hidden, dim),
            w_logvar: glorot(hidden, dim),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<T>> {
        vec![&self.w0, &self.w_mu, &self.w_logvar]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        vec![&mut self.w0, &mut self.w_mu, &mut self.w_logvar]
    }
}

/// Fixed inputs of the reconstruction problem.
#[derive(Debug, Clone)]
pub struct VgaeProblem<T> {
    adjacency: NormalizedAdjacency<T>,
    /// `Ã X`.
    propagated: Array2<T>,
    /// Dense `A + I`.
    target: Array2<T>,
    pos_weight: T,
    norm: T,
}

impl<T: Real> VgaeProblem<T> {
    pub fn new(g: &GraphDataset) -> Self {
        let n = g.num_nodes();
        let adjacency = g.adjacency().normalized::<T>();
        let x = g.features().mapv(|v| T::lit(v as f64));
        let propagated = adjacency.matrix().matmul(&x.view());
        let mut target = Array2::<T>::eye(n);
        for (u, v) in g.adjacency().edges() {
            target[[u, v]] = T::one();
            target[[v, u]] = T::one();
        }
        let n2 = (n * n) as f64;
        let e = (2 * g.adjacency().num_edges()).max(1) as f64;
        VgaeProblem {
            adjacency,
            propagated,
            target,
            pos_weight: T::lit((n2 - e) / e),
            norm: T::lit(n2 / (2.0 * (n2 - e).max(1.0))),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.target.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.propagated.ncols()
    }
}

struct Tape<T> {
    pre: Array2<T>,
    ah: Array2<T>,
    mu: Array2<T>,
    logvar: Array2<T>,
    z: Array2<T>,
    logits: Array2<T>,
}

fn run<T: Real>(p: &VgaeProblem<T>, w: &VgaeParams<T>, eps: &Array2<T>) -> Tape<T> {
    let pre = p.propagated.dot(&w.w0);
    let h = pre.mapv(|x| x.max(T::zero()));
    let ah = p.adjacency.matrix().matmul(&h.view());
    let mu = ah.dot(&w.w_mu);
    let logvar = ah.dot(&w.w_logvar);
    let half = T::lit(0.5);
    let mut z = mu.clone();
    Zip::from(&mut z)
        .and(&logvar)
        .and(eps)
        .for_each(|z, &lv, &e| *z += e * (lv * half).exp());
    let logits = z.dot(&z.t());
    Tape {
        pre,
        ah,
        mu,
        logvar,
        z,
        logits,
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (T::zero() - x.abs()).exp()).ln()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (T::zero() - x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `mean_i KL(N(μ_i, diag e^{logvar_i}) ‖ N(0, I))`.
pub fn kl_divergence<T: Real>(mu: &Array2<T>, logvar: &Array2<T>) -> T {
    let n = T::lit(mu.nrows() as f64);
    let half = T::lit(0.5);
    let mut total = T::zero();
    Zip::from(mu)
        .and(logvar)
        .for_each(|&m, &lv| total += half * (lv.exp() + m * m - T::one() - lv));
    total / n
}

fn objective<T: Real>(p: &VgaeProblem<T>, t: &Tape<T>) -> T {
    let n = p.num_nodes();
    let mut recon = T::zero();
    Zip::from(&t.logits).and(&p.target).for_each(|&x, &y| {
        recon += p.pos_weight * y * softplus(T::zero() - x) + (T::one() - y) * softplus(x);
    });
    let n2 = T::lit((n * n) as f64);
    p.norm * recon / n2 + kl_divergence(&t.mu, &t.logvar) / T::lit(n as f64)
}

/// Loss for a fixed reparameterisation noise `eps` (`N × d`).
pub fn loss<T: Real>(p: &VgaeProblem<T>, w: &VgaeParams<T>, eps: &Array2<T>) -> T {
    objective(p, &run(p, w, eps))
}

/// Loss and its exact gradient for a fixed `eps`.
pub fn loss_and_grad<T: Real>(p: &VgaeProblem<T>, w: &VgaeParams<T>, eps: &Array2<T>) -> (T, VgaeParams<T>) {
    let t = run(p, w, eps);
    let value = objective(p, &t);
    let n = p.num_nodes();
    let n2 = T::lit((n * n) as f64);
    let scale = p.norm / n2;

    let mut g = t.logits.clone();
    Zip::from(&mut g).and(&p.target).for_each(|g, &y| {
        let s = sigmoid(*g);
        *g = scale * (p.pos_weight * y * (s - T::one()) + (T::one() - y) * s);
    });
    let sym = &g + &g.t();
    let dz = sym.dot(&t.z);

    let half = T::lit(0.5);
    let mut d_mu = dz.clone();
    Zip::from(&mut d_mu).and(&t.mu).for_each(|d, &m| *d += m / n2);
    let mut d_lv = dz;
    Zip::from(&mut d_lv)
        .and(&t.logvar)
        .and(eps)
        .for_each(|d, &lv, &e| *d = *d * e * half * (lv * half).exp() + half * (lv.exp() - T::one()) / n2);

    let grad_mu = t.ah.t().dot(&d_mu);
    let grad_lv = t.ah.t().dot(&d_lv);
    let d_ah = d_mu.dot(&w.w_mu.t()) + d_lv.dot(&w.w_logvar.t());
    let mut d_pre = p.adjacency.matrix().matmul(&d_ah.view());
    Zip::from(&mut d_pre).and(&t.pre).for_each(|d, &s| {
        if s <= T::zero() {
            *d = T::zero();
        }
    });
    let grad_w0 = p.propagated.t().dot(&d_pre);
    (
        value,
        VgaeParams {
            w0: grad_w0,
            w_mu: grad_mu,
            w_logvar: grad_lv,
        },
    )
}

/// Smallest `|pre-activation|` of the hidden layer, for kink-free gradient checks.
pub fn min_abs_pre_activation<T: Real>(p: &VgaeProblem<T>, w: &VgaeParams<T>) -> f64 {
    p.propagated
        .dot(&w.w0)
        .iter()
        .map(|x| x.abs().as_f64())
        .fold(f64::INFINITY, f64::min)
}

pub fn encode_mean<T: Real>(p: &VgaeProblem<T>, w: &VgaeParams<T>) -> Array2<T> {
    let h = p.propagated.dot(&w.w0).mapv(|x| x.max(T::zero()));
    p.adjacency.matrix().matmul(&h.view()).dot(&w.w_mu)
}

/// Trained parameters and the per-epoch loss curve.
pub fn train_vgae<T: Real>(p: &VgaeProblem<T>, cfg: &VgaeConfig, seed: u64) -> Result<(VgaeParams<T>, Vec<f64>)> {
    let mut params = VgaeParams::<T>::init(p.num_features(), cfg.hidden, cfg.dim, seed);
    let mut state = AdamState::new(params.tensors());
    let hyper = AdamConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_5A5A);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let eps = Array2::from_shape_fn((p.num_nodes(), cfg.dim), |_| T::lit(StandardNormal.sample(&mut rng)));
        let (value, grads) = loss_and_grad(p, &params, &eps);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("VGAE loss at epoch {epoch}")));
        }
        history.push(value.as_f64());
        adam_step(params.tensors_mut(), grads.tensors(), &mut state, &hyper);
    }
    Ok((params, history))
}

/// Trains on `g` in `f64` and returns `μ`.
pub fn vgae_embed(g: &GraphDataset, cfg: &VgaeConfig, seed: u64) -> Result<Array2<f32>> {
    let problem = VgaeProblem::<f64>::new(g);
    let (params, _) = train_vgae(&problem, cfg, seed)?;
    Ok(encode_mean(&problem, &params).mapv(|x| x as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::graph;
    use rand::Rng;

    fn two_cliques(size: usize) -> GraphDataset {
        let mut edges = Vec::new();
        for base in [0, size] {
            for a in 0..size {
                for b in a + 1..size {
                    edges.push((base + a, base + b));
                }
            }
        }
        graph(2 * size, &edges)
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let z = Array2::<f64>::zeros((4, 3));
        assert_eq!(kl_divergence(&z, &z), 0.0);
    }

    #[test]
    fn finite_difference_gradient() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)]);
        let mut checked = 0;
        let mut seed = 0;
        while checked < 3 {
            seed += 1;
            let p = VgaeProblem::<f64>::new(&g);
            let w = VgaeParams::<f64>::init(p.num_features(), 4, 3, seed);
            if min_abs_pre_activation(&p, &w) < 1e-3 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
            let (_, grad) = loss_and_grad(&p, &w, &eps);
            let h = 1e-4;
            for t in 0..3 {
                let (r, c) = w.tensors()[t].dim();
                for i in 0..r {
                    for j in 0..c {
                        let mut plus = w.clone();
                        plus.tensors_mut()[t][[i, j]] += h;
                        let mut minus = w.clone();
                        minus.tensors_mut()[t][[i, j]] -= h;
                        let fd = (loss(&p, &plus, &eps) - loss(&p, &minus, &eps)) / (2.0 * h);
                        let an = grad.tensors()[t][[i, j]];
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                        assert!(rel < 1e-4, "tensor {t} ({i},{j}): fd {fd} vs {an}");
                    }
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn reconstructs_cliques_and_is_deterministic() {
        let g = two_cliques(6);
        let cfg = VgaeConfig {
            hidden: 16,
            dim: 8,
            epochs: 150,
            lr: 0.01,
        };
        let p = VgaeProblem::<f64>::new(&g);
        let (w, hist) = train_vgae(&p, &cfg, 3).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let mu = encode_mean(&p, &w);
        let logits = mu.dot(&mu.t());
        let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0, 0);
        for i in 0..12 {
            for j in (0..12).filter(|&j| j != i) {
                let prob = sigmoid(logits[[i, j]]);
                if (i < 6) == (j < 6) {
                    intra += prob;
                    ni += 1;
                } else {
                    inter += prob;
                    ne += 1;
                }
            }
        }
        assert!(intra / ni as f64 > inter / ne as f64);
        assert_eq!(vgae_embed(&g, &cfg, 9).unwrap(), vgae_embed(&g, &cfg, 9).unwrap());
    }
}
