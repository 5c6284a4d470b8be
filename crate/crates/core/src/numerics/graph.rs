//! Tape-based reverse-mode differentiation over two-dimensional tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! of parameters are borrowed from the [`ParamStore`] rather than copied.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! table with one entry per recorded node.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::scalar::{gemm, MatView, Scalar};

/// Additive attention-mask value standing in for negative infinity.
///
/// `exp(MASK_SENTINEL - max)` underflows to exactly zero in both `f32` and
/// `f64`, so masked keys receive exactly zero weight and zero gradient while
/// all arithmetic stays finite.
pub const MASK_SENTINEL: f64 = -1.0e9;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Attention(Box<AttentionTape<T>>),
    RepeatRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SumAll(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct AttentionTape<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    probs: Vec<T>,
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// Recording of one forward pass.
pub struct Graph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<'a, T>>,
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2], what: &str) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::Shape(format!(
            "{what}: cannot broadcast {}x{} with {}x{}",
            a[0], a[1], b[0], b[1]
        ))),
    }
}

#[inline]
fn bidx(shape: [usize; 2], i: usize, j: usize) -> usize {
    let r = if shape[0] == 1 { 0 } else { i };
    let c = if shape[1] == 1 { 0 } else { j };
    r * shape[1] + c
}

fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    what: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let [r, c] = broadcast_shape(a.shape(), b.shape(), what)?;
    let (ad, bd) = (a.data(), b.data());
    let (sa, sb) = (a.shape(), b.shape());
    Ok(Tensor::from_fn(r, c, |i, j| f(ad[bidx(sa, i, j)], bd[bidx(sb, i, j)])))
}

/// Sum a full-shape gradient down to a (possibly broadcast) operand shape.
fn reduce_grad<T: Scalar>(grad: &Tensor<T>, shape: [usize; 2]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..grad.rows() {
        for j in 0..grad.cols() {
            let idx = bidx(shape, i, j);
            out.data_mut()[idx] += grad.get(i, j);
        }
    }
    out
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let t = (k * (x + T::lit(GELU_C) * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0 * GELU_C) * x * x)
}

/// Row-wise softmax in place; returns nothing, the slice holds probabilities.
fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Record a constant or differentiable input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Input)
    }

    pub fn input_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store;
        self.push(Cow::Borrowed(&store.get(id).tensor), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Cow::Owned(out), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(Cow::Owned(out), Op::Scale(a, s))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Cow::Owned(out), Op::Offset(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.push(Cow::Owned(out), Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(Cow::Owned(out), Op::Gelu(a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        let n = T::lit(c as f64);
        let eps = T::lit(eps);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        self.push(Cow::Owned(out), Op::LayerNorm { x, rstd })
    }

    /// Multi-head scaled dot-product attention core (projections excluded).
    ///
    /// `q` holds `batch` stacked query segments, `k`/`v` hold `batch` stacked
    /// key/value segments; attention never crosses segments. `mask` is an
    /// optional additive `Tq x Tk` matrix shared by every segment and head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("model width {d} not divisible by {heads} heads")));
        }
        if batch == 0 || qv.rows() % batch != 0 || kv.rows() % batch != 0 {
            return Err(Error::Shape(format!("attention rows not divisible into {batch} segments")));
        }
        let tq = qv.rows() / batch;
        let tk = kv.rows() / batch;
        if let Some(m) = mask {
            m.expect_shape([tq, tk], "attention mask")?;
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let qview = MatView::row_major(b * tq * d + h * dh, tq, dh, d);
                let kview = MatView::row_major(b * tk * d + h * dh, tk, dh, d);
                let pview = MatView::row_major(p_off, tq, tk, tk);
                gemm(scale, qv.data(), qview, kv.data(), kview.t(), T::zero(), &mut probs, pview);
                for i in 0..tq {
                    let row = &mut probs[p_off + i * tk..p_off + (i + 1) * tk];
                    if let Some(m) = mask {
                        for (x, &mv) in row.iter_mut().zip(m.row(i)) {
                            *x += mv;
                        }
                    }
                    softmax_row(row);
                }
                let oview = MatView::row_major(b * tq * d + h * dh, tq, dh, d);
                let vview = MatView::row_major(b * tk * d + h * dh, tk, dh, d);
                gemm(T::one(), &probs, pview, vv.data(), vview, T::zero(), out.data_mut(), oview);
            }
        }
        let tape = AttentionTape { q, k, v, heads, batch, probs };
        Ok(self.push(Cow::Owned(out), Op::Attention(Box::new(tape))))
    }

    /// Row `i` of the output is row `i / n` of `a`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let out = Tensor::from_fn(av.rows() * n, av.cols(), |i, j| av.get(i / n, j));
        self.push(Cow::Owned(out), Op::RepeatRows(a, n))
    }

    /// Gather rows by index (embedding lookup).
    pub fn select_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Range(format!("row {bad} of a {}-row table", tv.rows())));
        }
        let out = Tensor::from_fn(idx.len(), tv.cols(), |i, j| tv.get(idx[i], j));
        Ok(self.push(Cow::Owned(out), Op::SelectRows(table, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&views)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p)[0]);
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[c0..c0 + pv.cols()].copy_from_slice(pv.row(i));
            }
            c0 += pv.cols();
        }
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::Range(format!("rows {start}..{} of {}", start + len, av.rows())));
        }
        let out = av.slice_rows(start, len);
        Ok(self.push(Cow::Owned(out), Op::SliceRows(a, start)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::SumAll(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::SumSquares(a))
    }

    /// Summed softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), lv.rows())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::Range(format!("label {bad} with {} classes", lv.cols())));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &mut probs[i * lv.cols()..(i + 1) * lv.cols()];
            softmax_row(row);
            loss -= row[label].max(T::min_positive_value()).ln();
        }
        let labels = labels.to_vec();
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), Op::CrossEntropy { logits, labels, probs }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::Shape(format!("backward from non-scalar {shape:?}")));
        }
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Reverse sweep seeded with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        seed.expect_shape(self.shape(root), "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params: self.param_map() })
    }

    fn param_map(&self) -> Vec<(usize, ParamId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect()
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let gav = ga.view();
                gemm(T::one(), g.data(), g.view(), bv.data(), bv.view().t(), T::zero(), ga.data_mut(), gav);
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                let gbv = gb.view();
                gemm(T::one(), av.data(), av.view().t(), g.data(), g.view(), T::zero(), gb.data_mut(), gbv);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, reduce_grad(g, self.shape(*a)));
                acc(grads, *b, reduce_grad(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, reduce_grad(g, self.shape(*a)));
                acc(grads, *b, reduce_grad(&g.scale(-T::one()), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let full_a = Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                    g.get(i, j) * bv.data()[bidx(sb, i, j)]
                });
                let full_b = Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                    g.get(i, j) * av.data()[bidx(sa, i, j)]
                });
                acc(grads, *a, reduce_grad(&full_a, sa));
                acc(grads, *b, reduce_grad(&full_b, sb));
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::Offset(a) => acc(grads, *a, g.clone()),
            Op::Silu(a) => {
                let out = self.value(*a).zip_map(g, |x, gy| gy * silu_grad(x)).expect("shape");
                acc(grads, *a, out);
            }
            Op::Gelu(a) => {
                let out = self.value(*a).zip_map(g, |x, gy| gy * gelu_grad(x)).expect("shape");
                acc(grads, *a, out);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let n = T::lit(c as f64);
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &gy), &yy) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = rstd[i] * (gy - mean_g - yy * mean_gy);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Attention(tape) => {
                let (gq, gk, gv) = self.attention_backward(tape, g);
                acc(grads, tape.q, gq);
                acc(grads, tape.k, gk);
                acc(grads, tape.v, gv);
            }
            Op::RepeatRows(a, n) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    for (o, &x) in ga.row_mut(i / n).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SelectRows(table, idx) => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for (o, &x) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    acc(grads, p, g.slice_rows(r0, rows));
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let [rows, cols] = self.shape(p);
                    let part = Tensor::from_fn(rows, cols, |i, j| g.get(i, c0 + j));
                    acc(grads, p, part);
                    c0 += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let [rows, cols] = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let [r, c] = self.shape(*a);
                acc(grads, *a, Tensor::full(r, c, g.get(0, 0)));
            }
            Op::SumSquares(a) => {
                let two_g = T::lit(2.0) * g.get(0, 0);
                acc(grads, *a, self.value(*a).scale(two_g));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let [r, c] = self.shape(*logits);
                let up = g.get(0, 0);
                let mut gl = Tensor::from_vec(r, c, probs.clone()).expect("shape");
                for (i, &l) in labels.iter().enumerate() {
                    let v = gl.get(i, l) - T::one();
                    gl.set(i, l, v);
                }
                acc(grads, *logits, gl.scale(up));
            }
        }
    }

    fn attention_backward(
        &self,
        tape: &AttentionTape<T>,
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (qv, kv, vv) = (self.value(tape.q), self.value(tape.k), self.value(tape.v));
        let d = qv.cols();
        let (heads, batch) = (tape.heads, tape.batch);
        let (tq, tk) = (qv.rows() / batch, kv.rows() / batch);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows(), d);
        let mut gk = Tensor::zeros(kv.rows(), d);
        let mut gv = Tensor::zeros(vv.rows(), d);
        let mut dp = vec![T::zero(); tq * tk];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let pview = MatView::row_major(p_off, tq, tk, tk);
                let qview = MatView::row_major(b * tq * d + h * dh, tq, dh, d);
                let kview = MatView::row_major(b * tk * d + h * dh, tk, dh, d);
                let gview = qview;
                // dV = P^T dO
                gemm(T::one(), &tape.probs, pview.t(), g.data(), gview, T::one(), gv.data_mut(), kview);
                // dP = dO V^T
                let dpview = MatView::row_major(0, tq, tk, tk);
                gemm(T::one(), g.data(), gview, vv.data(), kview.t(), T::zero(), &mut dp, dpview);
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..tq {
                    let prow = &tape.probs[p_off + i * tk..p_off + (i + 1) * tk];
                    let drow = &mut dp[i * tk..(i + 1) * tk];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &x)| p * x).sum();
                    for (x, &p) in drow.iter_mut().zip(prow) {
                        *x = p * (*x - dot);
                    }
                }
                gemm(scale, &dp, dpview, kv.data(), kview, T::one(), gq.data_mut(), qview);
                gemm(scale, &dp, dpview.t(), qv.data(), qview, T::one(), gk.data_mut(), kview);
            }
        }
        (gq, gk, gv)
    }
}

/// Gradients of one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients, summed over every use of the parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for &(node, id) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}
