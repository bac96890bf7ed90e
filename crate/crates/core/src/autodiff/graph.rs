//! Tape-based reverse-mode differentiation over a fixed operation catalog.
//!
//! Every op evaluates eagerly when it is recorded and keeps whatever its
//! backward pass needs (normalized activations, attention weights, norms).
//! A recording supports exactly one [`Graph::backward`] call.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::scalar::{gemm, View};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMulNT { a: Var, b: Var },
    Relu(Var),
    Gelu { x: Var, deriv: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast { x: Var, y: Var },
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanPool { x: Var, group: usize },
    Upsample { x: Var, factor: usize },
    Sinusoidal { t: Var, dim: usize },
    Concat(Var, Var),
    L2Normalize { x: Var, norms: Vec<T> },
    Reshape(Var),
    Diag(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, l, d] => Ok((b, l, d)),
        ref s => Err(Error::shape(op, format!("expected [batch, len, dim], got {s:?}"))),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    // tanh via exp is several times faster than libm tanh here
    let th = one - T::lit(2.0) / ((u + u).exp() + one);
    let y = half * x * (one + th);
    let du = c * (one + T::lit(3.0) * a * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * du;
    (y, dy)
}

/// Sinusoidal embedding of real positions: first half sines, second half cosines.
pub fn sinusoidal_table<T: Scalar>(positions: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim.is_multiple_of(2), "sinusoidal embedding needs an even width");
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let mut row = vec![T::zero(); dim];
        for j in 0..half {
            let f = sinusoid_freq(j, half);
            row[j] = T::lit((p * f).sin());
            row[half + j] = T::lit((p * f).cos());
        }
        data.extend(row);
    }
    Tensor::from_vec(&[positions.len(), dim], data).expect("consistent table shape")
}

fn sinusoid_freq(j: usize, half: usize) -> f64 {
    (-(10000f64.ln()) * j as f64 / half as f64).exp()
}

/// For each flat index of `xs`, the flat index of the broadcast operand `ys`.
fn broadcast_map(xs: &[usize], ys: &[usize]) -> Vec<usize> {
    let rank = xs.len();
    let mut ystride = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        ystride[i] = if ys[i] == 1 { 0 } else { acc };
        acc *= ys[i];
    }
    let n: usize = xs.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut yi = 0usize;
    for _ in 0..n {
        out.push(yi);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            yi += ystride[ax];
            if idx[ax] < xs[ax] {
                break;
            }
            yi -= ystride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable parameter leaf; gradients are reported under `name`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?.clone();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, param: Some(name.to_string()) });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a parameter as a constant (frozen model).
    pub fn frozen(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?.clone();
        Ok(self.constant(value))
    }

    // ---- catalog -------------------------------------------------------

    /// `x · w + b` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let &[din, dout] = wt.shape() else {
            return Err(Error::shape("affine", format!("weight must be 2-D, got {:?}", wt.shape())));
        };
        if xt.last_dim() != din {
            return Err(Error::shape("affine", format!("input {:?} vs weight {:?}", xt.shape(), wt.shape())));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape("affine", format!("bias {:?}, expected [{dout}]", self.value(b).shape())));
            }
        }
        let rows = xt.numel() / din;
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut out = vec![T::zero(); rows * dout];
        gemm(rows, din, dout, xt.data(), View::rows(0, din), wt.data(), View::rows(0, dout), &mut out, View::rows(0, dout), false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("affine", value, Op::Affine { x, w, b }, &inputs)
    }

    /// `a · bᵀ` for 2-D operands `[m, k]` and `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (&[m, k], &[n, k2]) = (at.shape(), bt.shape()) else {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", at.shape(), bt.shape())));
        };
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", at.shape(), bt.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, at.data(), View::rows(0, k), bt.data(), View::rows(0, k).t(), &mut out, View::rows(0, n), false);
        let value = Tensor::from_vec(&[m, n], out)?;
        self.push("matmul_nt", value, Op::MatMulNT { a, b }, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (out, deriv): (Vec<T>, Vec<T>) = xt.data().iter().map(|&v| gelu_parts(v)).unzip();
        let value = Tensor::from_vec(xt.shape(), out)?;
        self.push("gelu", value, Op::Gelu { x, deriv }, &[x])
    }

    /// Per-row normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape("layer_norm", format!("scale/shift must be [{d}]")));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let rows = xt.numel() / d;
        let mut xhat = vec![T::zero(); xt.numel()];
        let mut rstd = vec![T::zero(); rows];
        for (r, row) in xt.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect();
        let value = Tensor::from_vec(xt.shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(xt.shape(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_vec(xt.shape(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Scaled dot-product multi-head attention. `q` is `[B, Lq, D]`, `k` and
    /// `v` are `[B, Lk, D]` (the memory sequence for cross-attention).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (b, lq, d) = rank3("attention", self.value(q))?;
        let (bk, lk, dk) = rank3("attention", self.value(k))?;
        if self.value(v).shape() != self.value(k).shape() || bk != b || dk != d {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", self.value(q).shape(), self.value(k).shape(), self.value(v).shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * lq * lk];
        let mut out = vec![T::zero(); b * lq * d];
        for bi in 0..b {
            for h in 0..heads {
                let qv = View::rows(bi * lq * d + h * dh, d);
                let kv = View::rows(bi * lk * d + h * dh, d);
                let pofs = (bi * heads + h) * lq * lk;
                let pv = View::rows(pofs, lk);
                gemm(lq, dh, lk, qd, qv, kd, kv.t(), &mut probs, pv, false);
                for row in probs[pofs..pofs + lq * lk].chunks_mut(lk) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(row);
                }
                gemm(lq, lk, dh, &probs, pv, vd, kv, &mut out, qv, false);
            }
        }
        let value = Tensor::from_vec(&[b, lq, d], out)?;
        self.push("attention", value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Attention weights of a recorded attention node, `[B, H, Lq, Lk]` flattened.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// `x + y` where `y` has the rank of `x` and extent 1 on broadcast axes.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.value(x).shape().to_vec(), self.value(y).shape().to_vec());
        if xs.len() != ys.len() || xs.iter().zip(&ys).any(|(&a, &b)| b != a && b != 1) {
            return Err(Error::shape("add_broadcast", format!("{xs:?} + {ys:?}")));
        }
        let map = broadcast_map(&xs, &ys);
        let yd = self.value(y).data();
        let data = self.value(x).data().iter().zip(&map).map(|(&a, &j)| a + yd[j]).collect();
        let value = Tensor::from_vec(&xs, data)?;
        self.push("add_broadcast", value, Op::AddBroadcast { x, y }, &[x, y])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push("exp", value, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push("square", value, Op::Square(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push("clamp", value, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let data: Vec<T> = t.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let shape = if t.shape().len() > 1 { t.shape()[..t.shape().len() - 1].to_vec() } else { vec![1] };
        let value = Tensor::from_vec(&shape, data)?;
        self.push("sum_last", value, Op::SumLast(x), &[x])
    }

    /// Averages consecutive groups of `group` positions along the sequence axis.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (b, l, d) = rank3("mean_pool", self.value(x))?;
        if group == 0 || l % group != 0 {
            return Err(Error::shape("mean_pool", format!("length {l} not divisible by group {group}")));
        }
        let lo = l / group;
        let inv = T::lit(1.0 / group as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * lo * d];
        for bi in 0..b {
            for i in 0..l {
                let src = &xd[(bi * l + i) * d..(bi * l + i + 1) * d];
                let dst = &mut out[(bi * lo + i / group) * d..(bi * lo + i / group + 1) * d];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[b, lo, d], out)?;
        self.push("mean_pool", value, Op::MeanPool { x, group }, &[x])
    }

    /// Nearest-neighbour upsampling along the sequence axis.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, l, d) = rank3("upsample", self.value(x))?;
        if factor == 0 {
            return Err(Error::shape("upsample", "factor must be positive"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * l * factor * d);
        for bi in 0..b {
            for i in 0..l * factor {
                let s = (bi * l + i / factor) * d;
                out.extend_from_slice(&xd[s..s + d]);
            }
        }
        let value = Tensor::from_vec(&[b, l * factor, d], out)?;
        self.push("upsample", value, Op::Upsample { x, factor }, &[x])
    }

    /// Sinusoidal embedding of a vector of real positions/timesteps, `[N] -> [N, dim]`.
    pub fn sinusoidal(&mut self, t: Var, dim: usize) -> Result<Var> {
        let tt = self.value(t);
        if tt.shape().len() != 1 {
            return Err(Error::shape("sinusoidal", format!("expected [N], got {:?}", tt.shape())));
        }
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::shape("sinusoidal", format!("width {dim} must be even")));
        }
        let value = sinusoidal_table(&tt.to_f64_vec(), dim);
        self.push("sinusoidal", value, Op::Sinusoidal { t, dim }, &[t])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (ra, rb) = (at.shape().len(), bt.shape().len());
        if ra != rb || at.shape()[..ra - 1] != bt.shape()[..rb - 1] {
            return Err(Error::shape("concat", format!("{:?} ++ {:?}", at.shape(), bt.shape())));
        }
        let (da, db) = (at.last_dim(), bt.last_dim());
        let mut out = Vec::with_capacity(at.numel() + bt.numel());
        for (ra, rb) in at.data().chunks(da).zip(bt.data().chunks(db)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        let value = Tensor::from_vec(&shape, out)?;
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    /// Scales every row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        let mut norms = Vec::with_capacity(xt.numel() / d);
        let mut out = Vec::with_capacity(xt.numel());
        for row in xt.data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::ZeroVector("l2_normalize"));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::from_vec(xt.shape(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let &[n, m] = xt.shape() else {
            return Err(Error::shape("diag", format!("expected square matrix, got {:?}", xt.shape())));
        };
        if n != m {
            return Err(Error::shape("diag", format!("expected square matrix, got {:?}", xt.shape())));
        }
        let data = (0..n).map(|i| xt.data()[i * n + i]).collect();
        let value = Tensor::from_vec(&[n], data)?;
        self.push("diag", value, Op::Diag(x), &[x])
    }

    // ---- reverse pass --------------------------------------------------

    /// Reverse-mode gradients of scalar `loss` for every parameter leaf.
    ///
    /// Parameters recorded but not reachable from `loss` get an all-zero
    /// gradient. Fails when called a second time on the same recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let (Op::Leaf, Some(name)) = (&node.op, &node.param) {
                match out.map.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.map.insert(name.clone(), g);
                    }
                }
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        for node in &self.nodes {
            if let Some(name) = &node.param {
                out.map.entry(name.clone()).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        for (name, g) in &out.map {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        Ok(out)
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(self.nodes[v.0].value.shape(), data);
        let gd = g.data();
        let res = match &node.op {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let (din, dout) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.numel() / din;
                let mut dx = vec![T::zero(); xt.numel()];
                gemm(rows, dout, din, gd, View::rows(0, dout), wt.data(), View::rows(0, dout).t(), &mut dx, View::rows(0, din), false);
                let mut dw = vec![T::zero(); din * dout];
                gemm(din, rows, dout, xt.data(), View::rows(0, din).t(), gd, View::rows(0, dout), &mut dw, View::rows(0, dout), false);
                let mut r = vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?)];
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    r.push((*b, like(*b, db)?));
                }
                r
            }
            Op::MatMulNT { a, b } => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, gd, View::rows(0, n), bt.data(), View::rows(0, k), &mut da, View::rows(0, k), false);
                let mut db = vec![T::zero(); n * k];
                gemm(n, m, k, gd, View::rows(0, n).t(), at.data(), View::rows(0, k), &mut db, View::rows(0, k), false);
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Relu(x) => {
                let d = val(*x).data().iter().zip(gd).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Gelu { x, deriv } => {
                let d = deriv.iter().zip(gd).map(|(&dv, &g)| g * dv).collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                let dn = T::lit(d as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (r, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                vec![(*x, like(*x, dx)?), (*gamma, like(*gamma, dgamma)?), (*beta, like(*beta, dbeta)?)]
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..d {
                        dr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (b, lq, d) = rank3("attention", val(*q))?;
                let lk = val(*k).shape()[1];
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut ds = vec![T::zero(); lq * lk];
                for bi in 0..b {
                    for h in 0..*heads {
                        let qv = View::rows(bi * lq * d + h * dh, d);
                        let kv = View::rows(bi * lk * d + h * dh, d);
                        let pofs = (bi * heads + h) * lq * lk;
                        let p = &probs[pofs..pofs + lq * lk];
                        // dP = dO · Vᵀ
                        gemm(lq, dh, lk, gd, qv, vd, kv.t(), &mut ds, View::rows(0, lk), false);
                        // dV = Pᵀ · dO
                        gemm(lk, lq, dh, p, View::rows(0, lk).t(), gd, qv, &mut dv, kv, false);
                        for (pr, sr) in p.chunks(lk).zip(ds.chunks_mut(lk)) {
                            let dot: T = pr.iter().zip(sr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..lk {
                                sr[j] = pr[j] * (sr[j] - dot) * scale;
                            }
                        }
                        gemm(lq, lk, dh, &ds, View::rows(0, lk), kd, kv, &mut dq, qv, false);
                        gemm(lk, lq, dh, &ds, View::rows(0, lk).t(), qd, qv, &mut dk, kv, false);
                    }
                }
                vec![(*q, like(*q, dq)?), (*k, like(*k, dk)?), (*v, like(*v, dv)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let da = gd.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::AddBroadcast { x, y } => {
                let map = broadcast_map(val(*x).shape(), val(*y).shape());
                let mut dy = vec![T::zero(); val(*y).numel()];
                for (&j, &gv) in map.iter().zip(gd) {
                    dy[j] += gv;
                }
                vec![(*x, g.clone()), (*y, like(*y, dy)?)]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Exp(x) => {
                let d = node.value.data().iter().zip(gd).map(|(&y, &g)| y * g).collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let d = val(*x).data().iter().zip(gd).map(|(&v, &g)| two * v * g).collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Clamp { x, lo, hi } => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > *lo && v < *hi { g } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::Mean(x) => {
                let n = T::lit(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), gd[0] / n))]
            }
            Op::SumLast(x) => {
                let d = val(*x).last_dim();
                let dx = gd.iter().flat_map(|&gv| std::iter::repeat_n(gv, d)).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::MeanPool { x, group } => {
                let (b, l, d) = rank3("mean_pool", val(*x))?;
                let lo = l / group;
                let inv = T::lit(1.0 / *group as f64);
                let mut dx = vec![T::zero(); b * l * d];
                for bi in 0..b {
                    for i in 0..l {
                        let src = &gd[(bi * lo + i / group) * d..(bi * lo + i / group + 1) * d];
                        for (o, &s) in dx[(bi * l + i) * d..(bi * l + i + 1) * d].iter_mut().zip(src) {
                            *o = s * inv;
                        }
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Upsample { x, factor } => {
                let (b, l, d) = rank3("upsample", val(*x))?;
                let mut dx = vec![T::zero(); b * l * d];
                for bi in 0..b {
                    for i in 0..l * factor {
                        let src = &gd[(bi * l * factor + i) * d..(bi * l * factor + i + 1) * d];
                        let s = (bi * l + i / factor) * d;
                        for (o, &v) in dx[s..s + d].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Sinusoidal { t, dim } => {
                let half = dim / 2;
                let dt = val(*t)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &tv)| {
                        let tv = tv.as_f64();
                        let mut acc = 0.0;
                        for j in 0..half {
                            let f = sinusoid_freq(j, half);
                            acc += f * ((tv * f).cos() * gd[i * dim + j].as_f64()
                                - (tv * f).sin() * gd[i * dim + half + j].as_f64());
                        }
                        T::lit(acc)
                    })
                    .collect();
                vec![(*t, like(*t, dt)?)]
            }
            Op::Concat(a, b) => {
                let (da, db) = (val(*a).last_dim(), val(*b).last_dim());
                let mut ga = Vec::with_capacity(val(*a).numel());
                let mut gb = Vec::with_capacity(val(*b).numel());
                for row in gd.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for (r, ((yr, gr), dr)) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Diag(x) => {
                let n = gd.len();
                let mut dx = vec![T::zero(); n * n];
                for i in 0..n {
                    dx[i * n + i] = gd[i];
                }
                vec![(*x, like(*x, dx)?)]
            }
        };
        Ok(res)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_repeats_over_unit_axes() {
        assert_eq!(broadcast_map(&[2, 3], &[1, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_map(&[2, 2, 2], &[2, 1, 2]), vec![0, 1, 0, 1, 2, 3, 2, 3]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(s), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        store.insert("b", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let _b = g.param(&store, "b").unwrap();
        let sq = g.square(a).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get("a").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn affine_identity_passes_input_through() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.7));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[4, 16], 10.0, &mut rng).map(|v| v + 2.0));
        let gamma = g.constant(Tensor::full(&[16], 1.0));
        let beta = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            // eps = 1e-5 shrinks the variance by var/(var+eps)
            assert!((var - 1.0).abs() < 1e-6, "variance {var}");
        }
    }

    #[test]
    fn attention_weights_are_distributions() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::randn(&[2, 3, 8], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[2, 5, 8], 1.0, &mut rng));
        let v = g.constant(Tensor::randn(&[2, 5, 8], 1.0, &mut rng));
        let o = g.attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(o).shape(), &[2, 3, 8]);
        let w = g.attention_weights(o).unwrap();
        for row in w.chunks(5) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap());
        assert!(matches!(g.l2_normalize(x), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn non_finite_values_trip_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1], &[1000.0]).unwrap());
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }
}
