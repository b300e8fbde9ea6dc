//! Adam with decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates for a list of tensors.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array2<T>>) -> Self {
        let m: Vec<_> = shapes.into_iter().map(|t| Array2::zeros(t.dim())).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One update: `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adam_step<T: Real>(
    params: Vec<&mut Array2<T>>,
    grads: Vec<&Array2<T>>,
    state: &mut AdamState<T>,
    hyper: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::lit(1.0 - hyper.beta1.powi(t));
    let c2 = T::lit(1.0 - hyper.beta2.powi(t));
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - hyper.beta1), T::lit(1.0 - hyper.beta2));
    let (lr, eps, wd) = (T::lit(hyper.lr), T::lit(hyper.eps), T::lit(hyper.weight_decay));
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.dim(), g.dim());
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        });
    }
}
