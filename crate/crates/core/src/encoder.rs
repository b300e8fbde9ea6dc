//! GCN encoder exposing every intermediate layer, per-layer projections into
//! a shared contrast space, and exact reverse-mode gradients.
//!
//! ```text
//! U(0) = X
//! U(k) = σ(Ã U(k-1) W(k))          k = 1..L
//! Z(k) = head(U(k) P(k))           k = 0..L
//! head(y) = elu(y W1 + b1) W2 + b2
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::GraphView;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu if x > T::zero() => T::one(),
            Activation::Relu => T::zero(),
            Activation::Identity => T::one(),
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[inline]
fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

/// Layer widths of an encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub input_dim: usize,
    /// Output width of each GCN layer; its length is the depth `L`.
    pub hidden: Vec<usize>,
    pub contrast_dim: usize,
    pub activation: Activation,
}

impl EncoderShape {
    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Width of `U(k)` for k = 0..L.
    pub fn layer_width(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.hidden[k - 1]
        }
    }

    /// Shapes in declaration order: W(1..L), P(0..L), W1, b1, W2, b2.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let l = self.num_layers();
        let dc = self.contrast_dim;
        let mut shapes: Vec<_> = (1..=l)
            .map(|k| (self.layer_width(k - 1), self.layer_width(k)))
            .collect();
        shapes.extend((0..=l).map(|k| (self.layer_width(k), dc)));
        shapes.extend([(dc, dc), (1, dc), (dc, dc), (1, dc)]);
        shapes
    }
}

/// Trainable parameters (or a gradient with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub activation: Activation,
    /// `W(k)` for k = 1..L.
    pub layers: Vec<Array2<T>>,
    /// `P(k)` for k = 0..L.
    pub projections: Vec<Array2<T>>,
    pub head_w1: Array2<T>,
    pub head_b1: Array2<T>,
    pub head_w2: Array2<T>,
    pub head_b2: Array2<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros(shape: &EncoderShape) -> Self {
        let tensors = shape.tensor_shapes().into_iter().map(Array2::zeros).collect();
        Self::from_tensors(shape.activation, shape.num_layers(), tensors)
    }

    fn from_tensors(activation: Activation, l: usize, mut t: Vec<Array2<T>>) -> Self {
        assert_eq!(t.len(), 2 * l + 5);
        let head: Vec<_> = t.split_off(2 * l + 1);
        let projections = t.split_off(l);
        let mut head = head.into_iter();
        EncoderParams {
            activation,
            layers: t,
            projections,
            head_w1: head.next().unwrap(),
            head_b1: head.next().unwrap(),
            head_w2: head.next().unwrap(),
            head_b2: head.next().unwrap(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            input_dim: self.layers[0].nrows(),
            hidden: self.layers.iter().map(|w| w.ncols()).collect(),
            contrast_dim: self.head_w1.nrows(),
            activation: self.activation,
        }
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Array2<T>> {
        self.layers
            .iter()
            .chain(&self.projections)
            .chain([&self.head_w1, &self.head_b1, &self.head_w2, &self.head_b2])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.layers
            .iter_mut()
            .chain(self.projections.iter_mut())
            .chain([
                &mut self.head_w1,
                &mut self.head_b1,
                &mut self.head_w2,
                &mut self.head_b2,
            ])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| t.mapv(|x| U::lit(x.as_f64())))
            .collect();
        EncoderParams::from_tensors(self.activation, self.num_layers(), tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Glorot-uniform weights; head biases uniform in `±1/√fan_in` so that an
/// all-zero input row still maps to a non-zero contrast vector.
pub fn init_params<T: Real>(shape: &EncoderShape, seed: u64) -> EncoderParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::<T>::zeros(shape);
    let n_weights = params.tensors().len();
    let mut fan_in = 1;
    for (idx, t) in params.tensors_mut().into_iter().enumerate() {
        let is_bias = idx == n_weights - 1 || idx == n_weights - 3;
        let bound = if is_bias {
            1.0 / (fan_in as f64).sqrt()
        } else {
            let (rows, cols) = t.dim();
            fan_in = rows;
            (6.0 / (rows + cols) as f64).sqrt()
        };
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        t.mapv_inplace(|_| T::lit(dist.sample(&mut rng)));
    }
    params
}

/// Per-layer node representations for one view.
#[derive(Debug, Clone)]
pub struct LayerEmbeddings<T> {
    /// `U(0)..U(L)`.
    pub hidden: Vec<Array2<T>>,
    /// `Z(0)..Z(L)`. Layers excluded from the pass hold a 0-row matrix.
    pub contrast: Vec<Array2<T>>,
}

#[derive(Debug, Clone)]
struct HeadTape<T> {
    projected: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

/// Result of [`forward`], retaining what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub embeddings: LayerEmbeddings<T>,
    pre_activations: Vec<Array2<T>>,
    heads: Vec<Option<HeadTape<T>>>,
}

fn check_finite<T: Real>(m: &Array2<T>, what: impl FnOnce() -> String) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn add_bias<T: Real>(m: &mut Array2<T>, bias: &Array2<T>) {
    let b = bias.row(0);
    for mut row in m.axis_iter_mut(Axis(0)) {
        row += &b;
    }
}

/// GCN layers only: `U(0)..U(L)`.
pub fn encode<T: Real>(view: &GraphView<T>, params: &EncoderParams<T>) -> Result<Vec<Array2<T>>> {
    Ok(propagate(view, params)?.0)
}

fn propagate<T: Real>(view: &GraphView<T>, params: &EncoderParams<T>) -> Result<(Vec<Array2<T>>, Vec<Array2<T>>)> {
    if view.features.ncols() != params.layers[0].nrows() {
        return Err(Error::Shape(format!(
            "view has {} features, encoder expects {}",
            view.features.ncols(),
            params.layers[0].nrows()
        )));
    }
    let a = view.adjacency.matrix();
    let mut hidden = vec![view.features.clone()];
    let mut pre_activations = Vec::with_capacity(params.num_layers());
    for (k, w) in params.layers.iter().enumerate() {
        let pre = a.matmul(&hidden[k].dot(w).view());
        check_finite(&pre, || format!("encoder layer {}", k + 1))?;
        hidden.push(pre.mapv(|x| params.activation.apply(x)));
        pre_activations.push(pre);
    }
    Ok((hidden, pre_activations))
}

/// Full forward pass computing every contrast layer.
pub fn forward<T: Real>(view: &GraphView<T>, params: &EncoderParams<T>) -> Result<ForwardPass<T>> {
    let active = vec![true; params.num_layers() + 1];
    forward_layers(view, params, &active)
}

/// Forward pass computing `Z(k)` only where `active[k]` is set.
pub fn forward_layers<T: Real>(
    view: &GraphView<T>,
    params: &EncoderParams<T>,
    active: &[bool],
) -> Result<ForwardPass<T>> {
    assert_eq!(active.len(), params.num_layers() + 1);
    let (hidden, pre_activations) = propagate(view, params)?;
    let dc = params.head_w1.nrows();
    let mut contrast = Vec::with_capacity(active.len());
    let mut heads = Vec::with_capacity(active.len());
    for (k, &on) in active.iter().enumerate() {
        if !on {
            contrast.push(Array2::zeros((0, dc)));
            heads.push(None);
            continue;
        }
        let projected = hidden[k].dot(&params.projections[k]);
        let mut pre = projected.dot(&params.head_w1);
        add_bias(&mut pre, &params.head_b1);
        let act = pre.mapv(elu);
        let mut z = act.dot(&params.head_w2);
        add_bias(&mut z, &params.head_b2);
        check_finite(&z, || format!("contrast projection of layer {k}"))?;
        contrast.push(z);
        heads.push(Some(HeadTape { projected, pre, act }));
    }
    Ok(ForwardPass {
        embeddings: LayerEmbeddings { hidden, contrast },
        pre_activations,
        heads,
    })
}

impl<T: Real> ForwardPass<T> {
    /// Reverse accumulation from `dJ/dZ(k)` to every parameter.
    ///
    /// `grad_contrast[k]` must match the shape of `Z(k)`; inactive layers take
    /// a 0-row matrix. `view` and `params` must be the ones used in the pass.
    pub fn backward(
        &self,
        view: &GraphView<T>,
        params: &EncoderParams<T>,
        grad_contrast: &[Array2<T>],
    ) -> EncoderParams<T> {
        let l = params.num_layers();
        assert_eq!(grad_contrast.len(), l + 1);
        let mut grads = EncoderParams::<T>::zeros(&params.shape());
        let hidden = &self.embeddings.hidden;
        let mut grad_hidden: Vec<Option<Array2<T>>> = vec![None; l + 1];

        for (k, (tape, gz)) in self.heads.iter().zip(grad_contrast).enumerate() {
            let Some(tape) = tape else {
                assert_eq!(gz.nrows(), 0, "gradient given for inactive layer {k}");
                continue;
            };
            assert_eq!(gz.dim(), self.embeddings.contrast[k].dim());
            grads.head_w2 += &tape.act.t().dot(gz);
            grads.head_b2 += &gz.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut g_pre = gz.dot(&params.head_w2.t());
            Zip::from(&mut g_pre)
                .and(&tape.pre)
                .and(&tape.act)
                .for_each(|g, &p, &a| {
                    if p <= T::zero() {
                        *g *= a + T::one();
                    }
                });
            grads.head_w1 += &tape.projected.t().dot(&g_pre);
            grads.head_b1 += &g_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let g_proj = g_pre.dot(&params.head_w1.t());
            grads.projections[k] = hidden[k].t().dot(&g_proj);
            if k > 0 {
                grad_hidden[k] = Some(g_proj.dot(&params.projections[k].t()));
            }
        }

        let a = view.adjacency.matrix();
        let mut carry: Option<Array2<T>> = None;
        for k in (1..=l).rev() {
            let g_u = match (grad_hidden[k].take(), carry.take()) {
                (Some(mut g), Some(c)) => {
                    g += &c;
                    g
                }
                (Some(g), None) | (None, Some(g)) => g,
                (None, None) => continue,
            };
            let mut g_pre = g_u;
            Zip::from(&mut g_pre)
                .and(&self.pre_activations[k - 1])
                .for_each(|g, &s| *g *= params.activation.derivative(s));
            // Ã is symmetric, so Ãᵀ g = Ã g.
            let g_m = a.matmul(&g_pre.view());
            grads.layers[k - 1] = hidden[k - 1].t().dot(&g_m);
            if k > 1 {
                carry = Some(g_m.dot(&params.layers[k - 1].t()));
            }
        }
        grads
    }

    /// `|S|` of the smallest-magnitude GCN pre-activation.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.pre_activations
            .iter()
            .flat_map(|p| p.iter())
            .map(|x| x.abs().as_f64())
            .fold(f64::INFINITY, f64::min)
    }
}

const MAGIC: &[u8; 8] = b"MXGCLENC";
const VERSION: u32 = 1;

/// Writes parameters as little-endian `f32` tensors after a shape header.
pub fn save_checkpoint<T: Real>(params: &EncoderParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let wrap = |e| Error::io(format!("writing {}", path.display()), e);
    let file = fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    let tensors = params.tensors();
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        params.num_layers() as u32,
        params.activation.code(),
        tensors.len() as u32,
    ] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    for t in &tensors {
        header.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        header.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
    }
    w.write_all(&header).map_err(wrap)?;
    for t in &tensors {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.iter() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams<f32>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not an encoder checkpoint"));
    }
    let read_u32 = |r: &mut BufReader<fs::File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let l = read_u32(&mut r)? as usize;
    let activation = Activation::from_code(read_u32(&mut r)?).ok_or_else(|| bad("unknown activation"))?;
    let count = read_u32(&mut r)? as usize;
    if l == 0 || count != 2 * l + 5 {
        return Err(bad("tensor count does not match layer count"));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        shapes.push((rows, cols));
    }
    let mut tensors = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Array2::from_shape_vec((rows, cols), data).expect("sized buffer"));
    }
    let params = EncoderParams::from_tensors(activation, l, tensors);
    if params.shape().tensor_shapes() != params.tensors().iter().map(|t| t.dim()).collect::<Vec<_>>() {
        return Err(bad("inconsistent shape chain"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::{graph, triangle};
    use ndarray::array;
    use rand::Rng;

    fn shape(input: usize, hidden: &[usize], dc: usize, act: Activation) -> EncoderShape {
        EncoderShape {
            input_dim: input,
            hidden: hidden.to_vec(),
            contrast_dim: dc,
            activation: act,
        }
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let g = triangle();
        let view = GraphView::<f64>::clean(&g);
        let params = EncoderParams::<f64>::zeros(&shape(2, &[3, 3], 2, Activation::Relu));
        let pass = forward(&view, &params).unwrap();
        assert_eq!(pass.embeddings.hidden[0], view.features);
        for u in &pass.embeddings.hidden[1..] {
            assert!(u.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_node_identity_layer_reproduces_input() {
        let g = graph(1, &[]);
        let view = GraphView::<f64>::clean(&g);
        let mut params = EncoderParams::<f64>::zeros(&shape(2, &[2], 2, Activation::Identity));
        params.layers[0] = Array2::eye(2);
        let u = encode(&view, &params).unwrap();
        assert_eq!(u[1], view.features);
    }

    #[test]
    fn triangle_of_ones_stays_ones() {
        let g = triangle();
        let mut view = GraphView::<f64>::clean(&g);
        view.features = Array2::ones((3, 2));
        let mut params = EncoderParams::<f64>::zeros(&shape(2, &[2], 2, Activation::Relu));
        params.layers[0] = Array2::eye(2);
        let u = encode(&view, &params).unwrap();
        for &x in u[1].iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let g = triangle();
        let view = GraphView::<f64>::clean(&g);
        let s = shape(2, &[3, 3], 2, Activation::Relu);
        let params = init_params::<f64>(&s, 4);
        let pass = forward(&view, &params).unwrap();
        let zeros: Vec<_> = pass
            .embeddings
            .contrast
            .iter()
            .map(|z| Array2::zeros(z.dim()))
            .collect();
        let grads = pass.backward(&view, &params, &zeros);
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn scalar_chain_rule() {
        // One node, one feature, identity activation: z = elu(x w p w1 + b1) w2 + b2.
        let g = graph(1, &[]);
        let mut view = GraphView::<f64>::clean(&g);
        view.features = array![[2.0]];
        let s = shape(1, &[1], 1, Activation::Identity);
        let mut params = EncoderParams::<f64>::zeros(&s);
        params.layers[0] = array![[0.5]];
        params.projections[1] = array![[3.0]];
        params.head_w1 = array![[0.25]];
        params.head_w2 = array![[4.0]];
        let pass = forward(&view, &params).unwrap();
        let grads = pass.backward(&view, &params, &[Array2::zeros((1, 1)), array![[1.0]]]);
        // pre = 2 * 0.5 * 3 * 0.25 = 0.75 > 0, so elu' = 1.
        assert!((grads.layers[0][[0, 0]] - 2.0 * 3.0 * 0.25 * 4.0).abs() < 1e-12);
        assert!((grads.head_w2[[0, 0]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn forward_layers_skips_inactive() {
        let g = triangle();
        let view = GraphView::<f64>::clean(&g);
        let params = init_params::<f64>(&shape(2, &[3, 3], 2, Activation::Relu), 1);
        let pass = forward_layers(&view, &params, &[false, false, true]).unwrap();
        assert_eq!(pass.embeddings.contrast[0].nrows(), 0);
        assert_eq!(pass.embeddings.contrast[2].nrows(), 3);
    }

    #[test]
    fn finite_difference_gradients() {
        // Linear read-out J = Σ_k <R_k, Z_k> so that dJ/dZ_k = R_k.
        for act in [Activation::Identity, Activation::Relu] {
            let mut checked = 0;
            let mut seed = 0;
            while checked < 3 {
                seed += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)]);
                let mut view = GraphView::<f64>::clean(&g);
                view.features = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
                let s = shape(4, &[3, 3], 2, act);
                let mut params = init_params::<f64>(&s, seed);
                for b in [&mut params.head_b1, &mut params.head_b2] {
                    b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                }
                let pass = forward(&view, &params).unwrap();
                if act == Activation::Relu && pass.min_abs_pre_activation() < 1e-3 {
                    continue;
                }
                let r: Vec<Array2<f64>> = pass
                    .embeddings
                    .contrast
                    .iter()
                    .map(|z| Array2::from_shape_fn(z.dim(), |_| rng.random_range(-1.0..1.0)))
                    .collect();
                let objective = |p: &EncoderParams<f64>| -> f64 {
                    let z = forward(&view, p).unwrap().embeddings.contrast;
                    z.iter().zip(&r).map(|(z, r)| (z * r).sum()).sum()
                };
                let grads = pass.backward(&view, &params, &r);
                let h = 1e-4;
                let n_tensors = params.tensors().len();
                for t in 0..n_tensors {
                    let dim = params.tensors()[t].dim();
                    for idx in 0..dim.0 * dim.1 {
                        let ij = (idx / dim.1, idx % dim.1);
                        let mut plus = params.clone();
                        plus.tensors_mut()[t][ij] += h;
                        let mut minus = params.clone();
                        minus.tensors_mut()[t][ij] -= h;
                        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                        let an = grads.tensors()[t][ij];
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                        assert!(rel < 1e-4, "{act:?} tensor {t} {ij:?}: fd {fd} vs {an}");
                    }
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let s = shape(30, &[20], 10, Activation::Relu);
        let a = init_params::<f32>(&s, 11);
        assert_eq!(a, init_params::<f32>(&s, 11));
        let bound = (6.0f32 / 50.0).sqrt();
        assert!(a.layers[0].iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = shape(7, &[5, 4], 3, Activation::Relu);
        let p = init_params::<f32>(&s, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
