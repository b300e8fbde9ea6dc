//! Multiplex soft-negative InfoNCE.
//!
//! For anchor `u_i^(L)` and hop `k`:
//!
//! ```text
//! ℓ_i^k = log  e^{θ(u_i^L, v_i^k)/τ} / ( e^{θ(u_i^L, v_i^k)/τ}
//!              + Σ_{j≠i} ω_ij^{Lk} e^{θ(u_i^L, v_j^k)/τ}
//!              + Σ_{j≠i} ω_ij^{Lk} e^{θ(u_i^L, u_j^k)/τ} )
//! L = 1/(2N) Σ_i Σ_k λ_k (ℓ_i^k(u→v) + ℓ_i^k(v→u))
//! ```
//!
//! `θ` is the cosine similarity. Training minimises `−L`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pae::{AffinityTable, OMEGA_BLOCK};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Cross-scale contrast with topological soft negatives.
    Mux,
    /// Same-scale contrast, `ω ≡ 1`, `λ` one-hot at `L`.
    Grace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    /// Per-hop weights `λ_0..λ_L`; uniform when absent.
    pub lambda: Option<Vec<f64>>,
    pub mode: LossMode,
    /// Lower bound `ω_min`; `max(1e-2, 2/N)` when absent.
    pub omega_floor: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            lambda: None,
            mode: LossMode::Mux,
            omega_floor: None,
        }
    }
}

fn check_lambda(lambda: &[f64], num_layers: usize) -> Result<()> {
    if lambda.len() != num_layers + 1 {
        return Err(Error::Config(format!(
            "lambda has {} entries, need {}",
            lambda.len(),
            num_layers + 1
        )));
    }
    if lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::Config("lambda entries must be non-negative".into()));
    }
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("lambda sums to {sum}, expected 1")));
    }
    Ok(())
}

impl LossConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau = {} must be positive", self.tau)));
        }
        if let Some(f) = self.omega_floor {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("omega_floor = {f} outside (0, 1]")));
            }
        }
        check_lambda(&self.lambda_for(num_layers), num_layers)
    }

    /// Effective `λ`: one-hot at `L` in grace mode, else configured or uniform.
    pub fn lambda_for(&self, num_layers: usize) -> Vec<f64> {
        match (self.mode, &self.lambda) {
            (LossMode::Grace, _) => one_hot(num_layers),
            (LossMode::Mux, Some(l)) => l.clone(),
            (LossMode::Mux, None) => vec![1.0 / (num_layers + 1) as f64; num_layers + 1],
        }
    }
}

fn one_hot(num_layers: usize) -> Vec<f64> {
    let mut l = vec![0.0; num_layers + 1];
    l[num_layers] = 1.0;
    l
}

/// Resolved loss: temperature, hop weights and negative weights.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    tau: f64,
    lambda: Vec<f64>,
    omega: &'a AffinityTable,
}

impl<'a> Objective<'a> {
    pub fn new(tau: f64, lambda: Vec<f64>, omega: &'a AffinityTable) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau = {tau} must be positive")));
        }
        check_lambda(&lambda, omega.num_layers()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Objective { tau, lambda, omega })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn omega(&self) -> &AffinityTable {
        self.omega
    }

    pub fn num_layers(&self) -> usize {
        self.lambda.len() - 1
    }

    /// Contrast layers the loss reads: `λ_k > 0`, plus `L` for the anchors.
    pub fn active_layers(&self) -> Vec<bool> {
        let l = self.num_layers();
        (0..=l).map(|k| k == l || self.lambda[k] > 0.0).collect()
    }
}

fn cosine<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::NonFinite("zero-norm contrast vector".into()));
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

fn check_stacks<T: Real>(zu: &[Array2<T>], zv: &[Array2<T>], obj: &Objective<'_>) -> Result<usize> {
    let l = obj.num_layers();
    if zu.len() != l + 1 || zv.len() != l + 1 {
        return Err(Error::Shape(format!(
            "contrast stacks have {} and {} layers, expected {}",
            zu.len(),
            zv.len(),
            l + 1
        )));
    }
    let n = zu[l].nrows();
    if n != obj.omega.num_nodes() {
        return Err(Error::Shape(format!(
            "{n} nodes in embeddings, {} in affinity table",
            obj.omega.num_nodes()
        )));
    }
    for (k, &on) in obj.active_layers().iter().enumerate() {
        if on && (zu[k].nrows() != n || zv[k].nrows() != n || zu[k].dim() != zv[k].dim()) {
            return Err(Error::Shape(format!("contrast layer {k} has inconsistent shape")));
        }
    }
    Ok(n)
}

fn omega_row(table: &AffinityTable, k: usize, i: usize) -> Option<Vec<f32>> {
    let start = i - i % OMEGA_BLOCK;
    let rows = start..(start + OMEGA_BLOCK).min(table.num_nodes());
    table.block(k, rows).map(|b| b.row(i - start).to_vec())
}

/// `ℓ_i^k` for anchor stack `za` against stack `zb`, evaluated term by term.
pub fn pair_loss<T: Real>(za: &[Array2<T>], zb: &[Array2<T>], i: usize, k: usize, obj: &Objective<'_>) -> Result<f64> {
    let n = check_stacks(za, zb, obj)?;
    let l = obj.num_layers();
    if i >= n || k > l {
        return Err(Error::InvalidArgument(format!("node {i} / hop {k} out of range")));
    }
    let anchor = za[l].row(i);
    let inv_tau = 1.0 / obj.tau;
    let pos = cosine(anchor, zb[k].row(i))? * inv_tau;
    let omega = omega_row(obj.omega, k, i);
    let mut logits = vec![(pos, 1.0)];
    for j in (0..n).filter(|&j| j != i) {
        let w = omega.as_ref().map_or(1.0, |r| r[j] as f64);
        logits.push((cosine(anchor, zb[k].row(j))? * inv_tau, w));
        logits.push((cosine(anchor, za[k].row(j))? * inv_tau, w));
    }
    let m = logits.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&(s, w)| w * (s - m).exp()).sum();
    Ok(pos - m - denom.ln())
}

/// `Σ_k λ_k ℓ_i^k`.
pub fn node_loss<T: Real>(za: &[Array2<T>], zb: &[Array2<T>], i: usize, obj: &Objective<'_>) -> Result<f64> {
    let mut total = 0.0;
    for (k, &lam) in obj.lambda.iter().enumerate() {
        if lam > 0.0 {
            total += lam * pair_loss(za, zb, i, k, obj)?;
        }
    }
    Ok(total)
}

/// Value of `L` and gradients of `−L` with respect to every contrast matrix.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: f64,
    pub grad_u: Vec<Array2<T>>,
    pub grad_v: Vec<Array2<T>>,
}

struct Normalized<T> {
    unit: Array2<T>,
    norms: Array1<T>,
}

fn normalize_rows<T: Real>(z: &Array2<T>, what: &str) -> Result<Normalized<T>> {
    let norms: Array1<T> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&x| !(x > T::zero()) || !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} row {i} has norm {}", norms[i])));
    }
    let mut unit = z.clone();
    for (mut row, &nrm) in unit.rows_mut().into_iter().zip(&norms) {
        row /= nrm;
    }
    Ok(Normalized { unit, norms })
}

/// Chain rule through `n = z/‖z‖`: `dz = (dn − n (n·dn)) / ‖z‖`.
fn unnormalize_grad<T: Real>(norm: &Normalized<T>, dn: &Array2<T>) -> Array2<T> {
    let mut dz = dn.clone();
    for ((mut g, n), &nrm) in dz.rows_mut().into_iter().zip(norm.unit.rows()).zip(&norm.norms) {
        let proj = n.dot(&g);
        Zip::from(&mut g).and(n).for_each(|g, &n| *g = (*g - n * proj) / nrm);
    }
    dz
}

struct DirectionGrads<'g, T> {
    anchor: &'g mut Array2<T>,
    cross: &'g mut Array2<T>,
    intra: &'g mut Array2<T>,
}

/// Sum over anchors of `ℓ_i^k` for one direction, optionally accumulating
/// `coef · ∂(−Σ_i ℓ_i)/∂` into the normalised-vector gradients.
#[allow(clippy::too_many_arguments)]
fn direction<T: Real>(
    x: &Array2<T>,
    y: &Array2<T>,
    w: &Array2<T>,
    omega: &AffinityTable,
    k: usize,
    tau: f64,
    coef: f64,
    mut grads: Option<DirectionGrads<'_, T>>,
) -> f64 {
    let n = x.nrows();
    let inv_tau = T::lit(1.0 / tau);
    let c = T::lit(coef);
    let mut total = 0.0f64;
    let mut sb = Array2::<T>::zeros((OMEGA_BLOCK.min(n), n));
    let mut sr = sb.clone();
    for start in (0..n).step_by(OMEGA_BLOCK) {
        let rows = start..(start + OMEGA_BLOCK).min(n);
        let b = rows.len();
        let xb = x.slice(s![rows.clone(), ..]);
        let mut sbv = sb.slice_mut(s![..b, ..]);
        let mut srv = sr.slice_mut(s![..b, ..]);
        general_mat_mul(inv_tau, &xb, &y.t(), T::zero(), &mut sbv);
        general_mat_mul(inv_tau, &xb, &w.t(), T::zero(), &mut srv);
        let om = omega.block(k, rows.clone());
        for a in 0..b {
            let i = start + a;
            let mut rb = sbv.row_mut(a);
            let mut rr = srv.row_mut(a);
            let rb = rb.as_slice_mut().expect("contiguous block row");
            let rr = rr.as_slice_mut().expect("contiguous block row");
            let pos = rb[i];
            rr[i] = T::lit(f64::NEG_INFINITY);
            let m = rb.iter().chain(rr.iter()).fold(pos, |m, &x| m.max(x));
            T::exp_shifted(rb, m);
            T::exp_shifted(rr, m);
            let pos_exp = rb[i];
            if let Some(om) = &om {
                let orow = om.row(a);
                Zip::from(&mut *rb).and(&mut *rr).and(orow).for_each(|sb, sr, &o| {
                    let o = T::lit(o as f64);
                    *sb *= o;
                    *sr *= o;
                });
            }
            rb[i] = pos_exp;
            rr[i] = T::zero();
            let denom: f64 = rb.iter().chain(rr.iter()).map(|x| x.as_f64()).sum();
            total += (pos - m).as_f64() - denom.ln();
            if grads.is_some() {
                // q_ij = weighted exp / denominator; d(−ℓ)/ds_b = q − δ, d(−ℓ)/ds_r = q.
                let scale = T::lit(coef / denom);
                rb.iter_mut().chain(rr.iter_mut()).for_each(|e| *e *= scale);
                rb[i] -= c;
            }
        }
        if let Some(g) = grads.as_mut() {
            let mut anchor_rows = g.anchor.slice_mut(s![rows, ..]);
            general_mat_mul(inv_tau, &sbv, y, T::one(), &mut anchor_rows);
            general_mat_mul(inv_tau, &srv, w, T::one(), &mut anchor_rows);
            general_mat_mul(inv_tau, &sbv.t(), &xb, T::one(), g.cross);
            general_mat_mul(inv_tau, &srv.t(), &xb, T::one(), g.intra);
        }
    }
    total
}

fn evaluate<T: Real>(
    zu: &[Array2<T>],
    zv: &[Array2<T>],
    obj: &Objective<'_>,
    want_grad: bool,
) -> Result<LossOutput<T>> {
    let n = check_stacks(zu, zv, obj)?;
    let l = obj.num_layers();
    let active = obj.active_layers();
    let mut nu = Vec::with_capacity(l + 1);
    let mut nv = Vec::with_capacity(l + 1);
    for k in 0..=l {
        if active[k] {
            nu.push(Some(normalize_rows(&zu[k], &format!("view 1 layer {k}"))?));
            nv.push(Some(normalize_rows(&zv[k], &format!("view 2 layer {k}"))?));
        } else {
            nu.push(None);
            nv.push(None);
        }
    }
    let zeros_like = |z: &[Array2<T>]| -> Vec<Array2<T>> { z.iter().map(|m| Array2::zeros(m.dim())).collect() };
    let mut gu = zeros_like(zu);
    let mut gv = zeros_like(zv);
    let mut value = 0.0;
    let unit =
        |v: &Vec<Option<Normalized<T>>>, k: usize| -> Array2<T> { v[k].as_ref().expect("active layer").unit.clone() };
    let (au, av) = (unit(&nu, l), unit(&nv, l));
    for k in (0..=l).filter(|&k| obj.lambda[k] > 0.0) {
        let coef = obj.lambda[k] / (2 * n) as f64;
        let (uk, vk) = (unit(&nu, k), unit(&nv, k));
        let run = |x: &Array2<T>, y: &Array2<T>, w: &Array2<T>, ga: &mut Vec<Array2<T>>, gb: &mut Vec<Array2<T>>| {
            if !want_grad {
                return direction(x, y, w, obj.omega, k, obj.tau, coef, None);
            }
            let mut d_anchor = Array2::zeros(x.dim());
            let mut d_cross = Array2::zeros(y.dim());
            let mut d_intra = Array2::zeros(w.dim());
            let s = direction(
                x,
                y,
                w,
                obj.omega,
                k,
                obj.tau,
                coef,
                Some(DirectionGrads {
                    anchor: &mut d_anchor,
                    cross: &mut d_cross,
                    intra: &mut d_intra,
                }),
            );
            ga[l] += &d_anchor;
            ga[k] += &d_intra;
            gb[k] += &d_cross;
            s
        };
        let s_uv = run(&au, &vk, &uk, &mut gu, &mut gv);
        let s_vu = run(&av, &uk, &vk, &mut gv, &mut gu);
        value += coef * (s_uv + s_vu);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    if want_grad {
        for k in 0..=l {
            if let (Some(a), Some(b)) = (&nu[k], &nv[k]) {
                gu[k] = unnormalize_grad(a, &gu[k]);
                gv[k] = unnormalize_grad(b, &gv[k]);
            }
        }
    }
    Ok(LossOutput {
        value,
        grad_u: gu,
        grad_v: gv,
    })
}

/// `L`, computed block-wise.
pub fn total_loss<T: Real>(zu: &[Array2<T>], zv: &[Array2<T>], obj: &Objective<'_>) -> Result<f64> {
    Ok(evaluate(zu, zv, obj, false)?.value)
}

/// `L` and the gradients of `−L`.
pub fn loss_and_gradients<T: Real>(zu: &[Array2<T>], zv: &[Array2<T>], obj: &Objective<'_>) -> Result<LossOutput<T>> {
    evaluate(zu, zv, obj, true)
}

/// GRACE's symmetric InfoNCE: [`total_loss`] with `ω ≡ 1` and `λ` one-hot at `L`.
pub fn grace_loss<T: Real>(zu: &[Array2<T>], zv: &[Array2<T>], tau: f64) -> Result<f64> {
    let l = zu
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Shape("empty stack".into()))?;
    let table = AffinityTable::uniform(zu[l].nrows(), l);
    let obj = Objective::new(tau, one_hot(l), &table)?;
    total_loss(zu, zv, &obj)
}

/// Mean of each `(u_i^(m), v_i^(n))` cosine, useful for logging.
pub fn mean_positive_similarity<T: Real>(zu: &Array2<T>, zv: &Array2<T>) -> f64 {
    let n = zu.nrows();
    let sims: f64 = zu
        .axis_iter(Axis(0))
        .zip(zv.axis_iter(Axis(0)))
        .map(|(a, b)| cosine(a, b).unwrap_or(0.0))
        .sum();
    sims / n.max(1) as f64
}
