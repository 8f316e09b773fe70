//! Tape-based reverse-mode differentiation over tensor-valued nodes.
//!
//! A [`Graph`] records every operation in creation order. Calling
//! [`Graph::backward`] on a single-element node walks the tape in reverse
//! and returns a gradient for every node that depends on a leaf created
//! with `needs_grad = true`.

use super::tensor::{dot, mm, mm_nt, mm_tn, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LN_EPS: f64 = 1e-12;

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// `heads x n x n` row-stochastic matrices.
    probs: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MaskScale(Var, Vec<T>),
    ScaleBy(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<Option<usize>>),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Attention(Box<AttentionCache<T>>),
    Softmax {
        x: Var,
        include: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MaskScale(..) => "mask_scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Sum(..) => "sum",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Attention(..) => "attention",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Fails with the first operation that produced NaN or Inf.
    pub fn check_finite(&self, step: usize) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite {
                step,
                detail: format!("node {node} ({op}) produced a non-finite value"),
            }),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mask_scale(&mut self, a: Var, mask: Vec<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), mask.len(), "mask length");
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::MaskScale(a, mask), ng)
    }

    /// `x * s` where `s` is a single-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by needs a scalar");
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        let ng = self.ng(&[x, s]);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let vs = self.value(src);
        let cols = vs.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(vs.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), cols], data).expect("gather shape");
        let ng = self.ng(&[src]);
        self.push(out, Op::GatherRows(src, idx), ng)
    }

    /// Places row `i` of `src` at row `targets[i]` of an `rows`-row output,
    /// summing collisions and dropping rows whose target is `None`.
    pub fn scatter_rows(&mut self, src: Var, targets: Vec<Option<usize>>, rows: usize) -> Var {
        let vs = self.value(src);
        assert_eq!(vs.rows(), targets.len(), "scatter targets");
        let cols = vs.cols();
        let mut out = Tensor::zeros(&[rows, cols]);
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                for (o, &v) in out.row_mut(t).iter_mut().zip(vs.row(i)) {
                    *o += v;
                }
            }
        }
        let ng = self.ng(&[src]);
        self.push(out, Op::ScatterRows(src, targets), ng)
    }

    /// Per-row normalization to zero mean and unit variance, then `* gain + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(self.value(gain).len(), cols, "layer_norm gain");
        assert_eq!(self.value(offset).len(), cols, "layer_norm offset");
        let eps = T::lit(LN_EPS);
        let n = T::lit(cols as f64);
        let mut normed = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            normed.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let g = self.value(gain).data();
        let b = self.value(offset).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(normed[r * cols + c] * g[c] + b[c]);
            }
        }
        let out = Tensor::from_vec(&[rows, cols], out).expect("layer_norm shape");
        let ng = self.ng(&[x, gain, offset]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                normed,
                inv_std,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Multi-head scaled dot-product attention over `[n x d]` projections.
    /// Keys whose `key_mask` entry is false receive zero probability.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (vq.rows(), vq.cols());
        assert_eq!(vk.shape(), vq.shape(), "attention key shape");
        assert_eq!(vv.shape(), vq.shape(), "attention value shape");
        assert_eq!(d % heads, 0, "heads divide width");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), n, "key mask length");
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = Tensor::zeros(&[n, d]);
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); n * dh];
        let mut vh = vec![T::zero(); n * dh];
        for h in 0..heads {
            split_head(vq.data(), &mut qh, n, d, h, dh);
            split_head(vk.data(), &mut kh, n, d, h, dh);
            split_head(vv.data(), &mut vh, n, d, h, dh);
            let scores = mm_nt(&qh, &kh, n, dh, n);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let row = &scores[i * n..(i + 1) * n];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if key_mask.is_none_or(|m| m[j]) && row[j] > max {
                        max = row[j];
                    }
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = if key_mask.is_none_or(|m| m[j]) {
                        ((row[j] - max) * scale).exp()
                    } else {
                        T::zero()
                    };
                    p[i * n + j] = e;
                    total += e;
                }
                for j in 0..n {
                    p[i * n + j] /= total;
                }
            }
            let oh = mm(p, &vh, n, n, dh);
            for i in 0..n {
                out.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache { q, k, v, heads, probs })),
            ng,
        )
    }

    /// Attention probabilities recorded by an attention node, `heads x n x n`.
    pub fn attention_probs(&self, node: Var) -> Option<(usize, &[T])> {
        match &self.nodes[node.0].op {
            Op::Attention(c) => Some((c.heads, &c.probs)),
            _ => None,
        }
    }

    /// Softmax over all elements of `x`, restricted to the `include` entries;
    /// excluded entries come out as exactly zero.
    pub fn softmax(&mut self, x: Var, include: Vec<bool>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), include.len(), "softmax include mask");
        let max = vx
            .data()
            .iter()
            .zip(&include)
            .filter(|(_, &inc)| inc)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        let mut out = vx.map(|_| T::zero());
        let mut total = T::zero();
        for (i, (&v, &inc)) in vx.data().iter().zip(&include).enumerate() {
            if inc {
                let e = (v - max).exp();
                out.data_mut()[i] = e;
                total += e;
            }
        }
        if total > T::zero() {
            out.scale_assign(T::one() / total);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax { x, include }, ng)
    }

    /// Summed negative log-likelihood over rows with a label.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<Option<usize>>) -> Var {
        let vl = self.value(logits);
        let (rows, cols) = (vl.rows(), vl.cols());
        assert_eq!(rows, labels.len(), "cross_entropy labels");
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for (r, label) in labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            let row = vl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[label];
        }
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, probs }, ng)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(va.shape(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), d).expect("shape"));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::MaskScale(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * sv));
                }
                if self.wants(*s) {
                    let ds = dot(g.data(), self.value(*x).data());
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::full(&shape, ds));
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut d = g.matmul_t(vb);
                    d = reshape_like(d, va);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = reshape_like(va.t_matmul(g), vb);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = reshape_like(g.matmul(vb), va);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = reshape_like(g.t_matmul(va), vb);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::GatherRows(src, idx) => {
                let vs = self.value(*src);
                let mut d = Tensor::zeros(vs.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::ScatterRows(src, targets) => {
                let vs = self.value(*src);
                let mut d = Tensor::zeros(vs.shape());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        d.row_mut(i).copy_from_slice(g.row(t));
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                normed,
                inv_std,
            } => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.rows(), vx.cols());
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*offset) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g.data()[r * cols + c];
                            dg[c] += gi * normed[r * cols + c];
                            db[c] += gi;
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*offset).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_vec(&gshape, dg).expect("shape"));
                    self.accumulate(grads, *offset, Tensor::from_vec(&bshape, db).expect("shape"));
                }
                if self.wants(*x) {
                    let n = T::lit(cols as f64);
                    let mut dx = Vec::with_capacity(rows * cols);
                    let mut dn = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut mean_dn = T::zero();
                        let mut mean_dn_n = T::zero();
                        for c in 0..cols {
                            dn[c] = g.data()[r * cols + c] * gv[c];
                            mean_dn += dn[c];
                            mean_dn_n += dn[c] * normed[r * cols + c];
                        }
                        mean_dn /= n;
                        mean_dn_n /= n;
                        for c in 0..cols {
                            dx.push(inv_std[r] * (dn[c] - mean_dn - normed[r * cols + c] * mean_dn_n));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx).expect("shape"));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gi, &xi)| gi * gelu_grad(xi))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), d).expect("shape"));
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::Softmax { x, include } => {
                let y = node.value.data();
                let inner: T = g.data().iter().zip(y).map(|(&a, &b)| a * b).sum();
                let d = y
                    .iter()
                    .zip(g.data())
                    .zip(include)
                    .map(|((&yi, &gi), &inc)| if inc { yi * (gi - inner) } else { T::zero() })
                    .collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&shape, d).expect("shape"));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let vl = self.value(*logits);
                let cols = vl.cols();
                let gs = g.data()[0];
                let mut d = vec![T::zero(); probs.len()];
                for (r, label) in labels.iter().enumerate() {
                    let Some(label) = *label else { continue };
                    for c in 0..cols {
                        d[r * cols + c] = gs * probs[r * cols + c];
                    }
                    d[r * cols + label] -= gs;
                }
                self.accumulate(grads, *logits, Tensor::from_vec(vl.shape(), d).expect("shape"));
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (vq, vk, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (n, d) = (vq.rows(), vq.cols());
        let dh = d / c.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = Tensor::zeros(&[n, d]);
        let mut dk = Tensor::zeros(&[n, d]);
        let mut dv = Tensor::zeros(&[n, d]);
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); n * dh];
        let mut vh = vec![T::zero(); n * dh];
        let mut gh = vec![T::zero(); n * dh];
        for h in 0..c.heads {
            split_head(vq.data(), &mut qh, n, d, h, dh);
            split_head(vk.data(), &mut kh, n, d, h, dh);
            split_head(vv.data(), &mut vh, n, d, h, dh);
            split_head(g.data(), &mut gh, n, d, h, dh);
            let p = &c.probs[h * n * n..(h + 1) * n * n];
            // dV = P^T dO ; dP = dO V^T
            let dvh = mm_tn(p, &gh, n, n, dh);
            let dp = mm_nt(&gh, &vh, n, dh, n);
            let mut ds = vec![T::zero(); n * n];
            for i in 0..n {
                let row_p = &p[i * n..(i + 1) * n];
                let row_dp = &dp[i * n..(i + 1) * n];
                let inner = dot(row_p, row_dp);
                for j in 0..n {
                    ds[i * n + j] = row_p[j] * (row_dp[j] - inner) * scale;
                }
            }
            let dqh = mm(&ds, &kh, n, n, dh);
            let dkh = mm_tn(&ds, &qh, n, n, dh);
            merge_head(&dqh, dq.data_mut(), n, d, h, dh);
            merge_head(&dkh, dk.data_mut(), n, d, h, dh);
            merge_head(&dvh, dv.data_mut(), n, d, h, dh);
        }
        self.accumulate(grads, c.q, dq);
        self.accumulate(grads, c.k, dk);
        self.accumulate(grads, c.v, dv);
    }
}

fn reshape_like<T: Scalar>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::from_vec(like.shape(), t.into_data()).expect("same element count")
    }
}

fn split_head<T: Scalar>(src: &[T], dst: &mut [T], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

fn merge_head<T: Scalar>(src: &[T], dst: &mut [T], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        for (o, &v) in dst[i * d + h * dh..i * d + (h + 1) * dh]
            .iter_mut()
            .zip(&src[i * dh..(i + 1) * dh])
        {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let unused = g.leaf(Tensor::scalar(5.0), true);
        let y = g.scale(x, 4.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn attention_rows_are_stochastic_and_respect_mask() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = g.constant(Tensor::from_vec(&[3, 4], data.clone()).unwrap());
        let k = g.constant(Tensor::from_vec(&[3, 4], data.iter().map(|v| v * 2.0).collect()).unwrap());
        let v = g.constant(Tensor::from_vec(&[3, 4], data).unwrap());
        let mask = [true, false, true];
        let a = g.attention(q, k, v, 2, Some(&mask));
        let (heads, p) = g.attention_probs(a).unwrap();
        assert_eq!(heads, 2);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[1], 0.0);
        }
    }

    #[test]
    fn layer_norm_of_zero_is_offset() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let gain = g.constant(Tensor::full(&[3], 2.0));
        let off = g.constant(Tensor::from_vec(&[3], vec![0.5, -1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gain, off);
        assert_eq!(g.value(y).row(1), &[0.5, -1.0, 3.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(f32::MAX));
        let y = g.scale(x, 10.0);
        let _ = y;
        assert!(g.check_finite(3).is_err());
    }
}
