//! Reverse-mode differentiation over a recorded operator graph.
//!
//! Nodes are appended in evaluation order, so node index order is a
//! topological order and `backward` walks indices downwards, visiting each
//! node once. An operator whose inputs are all constants is folded into a
//! constant node and records nothing.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{numel, split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Smoothing term of the dice ratio; keeps the empty/empty case at zero loss.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Probability clamp applied before taking logarithms in cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;
/// Denominator guard of min-max normalization.
pub const MINMAX_EPS: f64 = 1e-8;

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale(Var, S),
    Softmax { input: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Linear { x: Var, w: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    Conv2d { x: Var, w: Var, b: Var, kernel: usize, cols: Vec<S> },
    Resize { input: Var },
    MaxAxis { input: Var, argmax: Vec<usize> },
    Mean(Var),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    MinMax { input: Var, axis: usize, argmin: Vec<usize>, argmax: Vec<usize> },
    Dice { pred: Var, gt: Var },
    Bce { pred: Var, gt: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A per-episode computation graph.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    inputs: Vec<Option<Tensor<S>>>,
    params: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient w.r.t. a differentiable input; `None` for constants and for
    /// inputs the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.inputs.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<S>> {
        self.params
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry an operator record (i.e. will be visited by
    /// backward).
    pub fn recorded(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf | Op::Param(_))).count()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant (detached) input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached copy of a node's value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Parameter node; repeated calls with the same id return the same node so
    /// gradients accumulate across all uses.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    // ---- forward operators -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![S::ZERO; m * n];
        gemm(S::ONE, MatView::rm(self.value(a).data(), m, k), MatView::rm(self.value(b).data(), k, n), S::ZERO, &mut out, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<S>> = inputs.iter().map(|v| self.value(*v)).collect();
        let t = Tensor::concat(&parts, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input).narrow(axis, start, len)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::Narrow { input, axis, start }, rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(op, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("maximum", a, b, |x, y| if y > x { y } else { x })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Maximum(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() {
            return Err(Error::InvalidAxis { op: "softmax", axis, rank: x.rank() });
        }
        let (o, l, i) = split_axis(x.shape(), axis);
        let y = kernels::softmax_axis(x.data(), o, l, i);
        let t = Tensor::new(x.shape().to_vec(), y)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::Softmax { input, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or(Error::InvalidAxis { op: "layer_norm", axis: 0, rank: 0 })?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return shape_err("layer_norm", tx.shape(), self.shape(gamma));
        }
        let (xhat, inv_std) = kernels::layer_norm_rows(tx.data(), n);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let y: Vec<S> = xhat.iter().enumerate().map(|(i, &h)| h * g[i % n] + b[i % n]).collect();
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// `x·w + b` with `x: n × in`, `w: in × out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.value(x).dims2("linear")?;
        let (din2, dout) = self.value(w).dims2("linear")?;
        if din != din2 {
            return shape_err("linear", self.shape(x), self.shape(w));
        }
        if self.shape(b) != [dout] {
            return shape_err("linear", self.shape(w), self.shape(b));
        }
        let bias = self.value(b).data();
        let mut out: Vec<S> = (0..n * dout).map(|i| bias[i % dout]).collect();
        gemm(S::ONE, MatView::rm(self.value(x).data(), n, din), MatView::rm(self.value(w).data(), din, dout), S::ONE, &mut out, dout);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new([n, dout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Scaled dot-product attention split across `heads`; `q: lq × dm`,
    /// `k`, `v: lk × dm`, scaling `1/√(dm/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (lq, dm) = self.value(q).dims2("attention")?;
        let (lk, dk) = self.value(k).dims2("attention")?;
        if dk != dm || self.shape(v) != self.shape(k) {
            return shape_err("attention", self.shape(q), self.shape(k));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(Error::InvalidArgument { op: "attention", reason: alloc::format!("{dm} not divisible into {heads} heads") });
        }
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), lq, lk, dm, heads);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::new([lq, dm], out)?, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Stride-1 "same" convolution of a `(c, h, w)` map with an odd
    /// `(c_out, c, k, k)` kernel and `c_out` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (c, h, wd) = match xs[..] {
            [c, h, w] => (c, h, w),
            _ => return shape_err("conv2d", &xs, &ws),
        };
        let (co, k) = match ws[..] {
            [co, ci, k, k2] if ci == c && k == k2 && k % 2 == 1 => (co, k),
            _ => return shape_err("conv2d", &xs, &ws),
        };
        if self.shape(b) != [co] {
            return shape_err("conv2d", &ws, self.shape(b));
        }
        let hw = h * wd;
        let cols = kernels::im2col(self.value(x).data(), c, h, wd, k);
        let bias = self.value(b).data();
        let mut out: Vec<S> = (0..co * hw).map(|i| bias[i / hw]).collect();
        gemm(S::ONE, MatView::rm(self.value(w).data(), co, c * k * k), MatView::rm(&cols, c * k * k, hw), S::ONE, &mut out, hw);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new([co, h, wd], out)?, Op::Conv2d { x, w, b, kernel: k, cols }, rg))
    }

    /// Bilinear resize (half-pixel centres) of a `(c, h, w)` map.
    pub fn resize(&mut self, input: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (c, h, w) = match s[..] {
            [c, h, w] if h > 0 && w > 0 => (c, h, w),
            _ => return shape_err("resize", &s, &[oh, ow]),
        };
        let y = kernels::resize_bilinear(self.value(input).data(), c, h, w, oh, ow);
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new([c, oh, ow], y)?, Op::Resize { input }, rg))
    }

    /// Maximum along one axis (the axis is removed). Ties pick the first index.
    pub fn max_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() || x.shape()[axis] == 0 {
            return Err(Error::InvalidAxis { op: "max_axis", axis, rank: x.rank() });
        }
        let (o, l, inn) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(o * inn);
        let mut argmax = Vec::with_capacity(o * inn);
        for oo in 0..o {
            for ii in 0..inn {
                let base = oo * l * inn + ii;
                let mut best = 0;
                for a in 1..l {
                    if x.data()[base + a * inn] > x.data()[base + best * inn] {
                        best = a;
                    }
                }
                argmax.push(base + best * inn);
                out.push(x.data()[base + best * inn]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { input, argmax }, rg))
    }

    /// Maximum over several axes (applied from the highest axis down).
    pub fn max_axes(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut v = input;
        for &a in sorted.iter().rev() {
            v = self.max_axis(v, a)?;
        }
        Ok(v)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = x.sum() / S::from_f64(x.len() as f64);
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(m), Op::Mean(input), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input).map(|x| if x > S::ZERO { x } else { S::ZERO });
        let rg = self.rg(&[input]);
        self.push(t, Op::Relu(input), rg)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, input: Var) -> Var {
        let half = S::from_f64(0.5);
        let r2 = S::from_f64(core::f64::consts::FRAC_1_SQRT_2);
        let t = self.value(input).map(|x| half * x * (S::ONE + (x * r2).erf()));
        let rg = self.rg(&[input]);
        self.push(t, Op::Gelu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input).map(sigmoid);
        let rg = self.rg(&[input]);
        self.push(t, Op::Sigmoid(input), rg)
    }

    /// Min-max normalization of every fibre along `axis`:
    /// `(x - min) / (max - min + 1e-8)`.
    pub fn minmax_norm(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() || x.shape()[axis] == 0 {
            return Err(Error::InvalidAxis { op: "minmax_norm", axis, rank: x.rank() });
        }
        let (o, l, inn) = split_axis(x.shape(), axis);
        let eps = S::from_f64(MINMAX_EPS);
        let mut y = vec![S::ZERO; x.len()];
        let mut argmin = Vec::with_capacity(o * inn);
        let mut argmax = Vec::with_capacity(o * inn);
        let d = x.data();
        for oo in 0..o {
            for ii in 0..inn {
                let base = oo * l * inn + ii;
                let (mut lo, mut hi) = (base, base);
                for a in 1..l {
                    let k = base + a * inn;
                    if d[k] < d[lo] {
                        lo = k;
                    }
                    if d[k] > d[hi] {
                        hi = k;
                    }
                }
                let denom = d[hi] - d[lo] + eps;
                for a in 0..l {
                    let k = base + a * inn;
                    y[k] = (d[k] - d[lo]) / denom;
                }
                argmin.push(lo);
                argmax.push(hi);
            }
        }
        let t = Tensor::new(x.shape().to_vec(), y)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::MinMax { input, axis, argmin, argmax }, rg))
    }

    /// Dice loss `1 - (2Σyŷ + s) / (Σy² + Σŷ² + s)` of probabilities `pred`
    /// against targets `gt`.
    pub fn dice_loss(&mut self, pred: Var, gt: Var) -> Result<Var> {
        let (p, y) = (self.value(pred), self.value(gt));
        if p.shape() != y.shape() {
            return shape_err("dice_loss", p.shape(), y.shape());
        }
        let (inter, union) = dice_terms(p.data(), y.data());
        let s = S::from_f64(DICE_SMOOTH);
        let loss = S::ONE - (S::from_f64(2.0) * inter + s) / (union + s);
        let rg = self.rg(&[pred, gt]);
        Ok(self.push(Tensor::scalar(loss), Op::Dice { pred, gt }, rg))
    }

    /// Pixel-averaged binary cross-entropy of probabilities `pred` (clamped to
    /// `[1e-7, 1 - 1e-7]`) against targets `gt`.
    pub fn bce_loss(&mut self, pred: Var, gt: Var) -> Result<Var> {
        let (p, y) = (self.value(pred), self.value(gt));
        if p.shape() != y.shape() {
            return shape_err("bce_loss", p.shape(), y.shape());
        }
        let c = S::from_f64(BCE_CLAMP);
        let total: S = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&pp, &yy)| {
                let q = pp.max(c).min(S::ONE - c);
                -(yy * q.ln() + (S::ONE - yy) * (S::ONE - q).ln())
            })
            .sum();
        let loss = total / S::from_f64(p.len() as f64);
        let rg = self.rg(&[pred, gt]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, gt }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Consumes the graph and returns gradients of the scalar `loss` w.r.t.
    /// every differentiable input and parameter.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut inputs: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut params = BTreeMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(ls.to_vec(), S::ONE));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => inputs[i] = Some(g),
                Op::Param(id) => {
                    params.insert(*id, g);
                }
                op => {
                    for (v, gv) in self.op_backward(op, &node.value, g)? {
                        if self.nodes[v.0].requires_grad {
                            add_into(&mut grads[v.0], gv);
                        }
                    }
                }
            }
        }
        Ok(Gradients { inputs, params })
    }

    fn op_backward(&self, op: &Op<S>, out: &Tensor<S>, g: Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let shaped = |v: &Var, data: Vec<S>| Tensor::new(val(v).shape().to_vec(), data);
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2("matmul")?;
                let n = val(b).shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![S::ZERO; m * k];
                    gemm(S::ONE, MatView::rm(g.data(), m, n), MatView::rm_t(val(b).data(), k, n), S::ZERO, &mut da, k);
                    res.push((*a, shaped(a, da)?));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::ZERO; k * n];
                    gemm(S::ONE, MatView::rm_t(val(a).data(), m, k), MatView::rm(g.data(), m, n), S::ZERO, &mut db, n);
                    res.push((*b, shaped(b, db)?));
                }
            }
            Op::Transpose(a) => res.push((*a, g.transpose2()?)),
            Op::Reshape(a) => res.push((*a, g.reshape(val(a).shape().to_vec())?)),
            Op::Concat { inputs, axis } => {
                let sizes: Vec<usize> = inputs.iter().map(|v| val(v).shape()[*axis]).collect();
                for (v, part) in inputs.iter().zip(g.split(*axis, &sizes)?) {
                    res.push((*v, part));
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = val(input).shape();
                let (o, l, inn) = split_axis(s, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![S::ZERO; val(input).len()];
                for oo in 0..o {
                    let src = &g.data()[oo * len * inn..(oo + 1) * len * inn];
                    let dst = oo * l * inn + start * inn;
                    dx[dst..dst + len * inn].copy_from_slice(src);
                }
                res.push((*input, shaped(input, dx)?));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g));
            }
            Op::Sub(a, b) => {
                res.push((*b, g.map(|x| -x)));
                res.push((*a, g));
            }
            Op::Mul(a, b) => {
                let da = g.data().iter().zip(val(b).data()).map(|(&x, &y)| x * y).collect();
                let db = g.data().iter().zip(val(a).data()).map(|(&x, &y)| x * y).collect();
                res.push((*a, shaped(a, da)?));
                res.push((*b, shaped(b, db)?));
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                let da = g.data().iter().enumerate().map(|(i, &x)| if vb[i] > va[i] { S::ZERO } else { x }).collect();
                let db = g.data().iter().enumerate().map(|(i, &x)| if vb[i] > va[i] { x } else { S::ZERO }).collect();
                res.push((*a, shaped(a, da)?));
                res.push((*b, shaped(b, db)?));
            }
            Op::Scale(a, c) => res.push((*a, g.map(|x| x * *c))),
            Op::Softmax { input, axis } => {
                let (o, l, inn) = split_axis(out.shape(), *axis);
                let dx = kernels::softmax_axis_backward(out.data(), g.data(), o, l, inn);
                res.push((*input, shaped(input, dx)?));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = val(gamma).len();
                let gm = val(gamma).data();
                let mut dgamma = vec![S::ZERO; n];
                let mut dbeta = vec![S::ZERO; n];
                let mut dxhat = vec![S::ZERO; g.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    dgamma[i % n] += gi * xhat[i];
                    dbeta[i % n] += gi;
                    dxhat[i] = gi * gm[i % n];
                }
                let dx = kernels::layer_norm_rows_backward(xhat, inv_std, &dxhat, n);
                res.push((*x, shaped(x, dx)?));
                res.push((*gamma, shaped(gamma, dgamma)?));
                res.push((*beta, shaped(beta, dbeta)?));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = val(x).dims2("linear")?;
                let dout = val(b).len();
                if self.requires_grad(*x) {
                    let mut dx = vec![S::ZERO; n * din];
                    gemm(S::ONE, MatView::rm(g.data(), n, dout), MatView::rm_t(val(w).data(), din, dout), S::ZERO, &mut dx, din);
                    res.push((*x, shaped(x, dx)?));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![S::ZERO; din * dout];
                    gemm(S::ONE, MatView::rm_t(val(x).data(), n, din), MatView::rm(g.data(), n, dout), S::ZERO, &mut dw, dout);
                    res.push((*w, shaped(w, dw)?));
                }
                let mut db = vec![S::ZERO; dout];
                for row in g.data().chunks(dout) {
                    for (a, &r) in db.iter_mut().zip(row) {
                        *a += r;
                    }
                }
                res.push((*b, shaped(b, db)?));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (lq, dm) = val(q).dims2("attention")?;
                let lk = val(k).shape()[0];
                let (dq, dk, dv) = kernels::attention_backward(
                    val(q).data(),
                    val(k).data(),
                    val(v).data(),
                    probs,
                    g.data(),
                    lq,
                    lk,
                    dm,
                    *heads,
                );
                res.push((*q, shaped(q, dq)?));
                res.push((*k, shaped(k, dk)?));
                res.push((*v, shaped(v, dv)?));
            }
            Op::Conv2d { x, w, b, kernel, cols } => {
                let xs = val(x).shape();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let co = val(w).shape()[0];
                let (hw, ckk) = (h * wd, c * kernel * kernel);
                if self.requires_grad(*w) {
                    let mut dw = vec![S::ZERO; co * ckk];
                    gemm(S::ONE, MatView::rm(g.data(), co, hw), MatView::rm_t(cols, ckk, hw), S::ZERO, &mut dw, ckk);
                    res.push((*w, shaped(w, dw)?));
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![S::ZERO; ckk * hw];
                    gemm(S::ONE, MatView::rm_t(val(w).data(), co, ckk), MatView::rm(g.data(), co, hw), S::ZERO, &mut dcols, hw);
                    res.push((*x, shaped(x, kernels::col2im(&dcols, c, h, wd, *kernel))?));
                }
                let db = g.data().chunks(hw).map(|r| r.iter().copied().sum()).collect();
                res.push((*b, shaped(b, db)?));
            }
            Op::Resize { input } => {
                let s = val(input).shape();
                let os = out.shape();
                let dx = kernels::resize_bilinear_backward(g.data(), s[0], s[1], s[2], os[1], os[2]);
                res.push((*input, shaped(input, dx)?));
            }
            Op::MaxAxis { input, argmax, .. } => {
                let mut dx = vec![S::ZERO; val(input).len()];
                for (&i, &gi) in argmax.iter().zip(g.data()) {
                    dx[i] += gi;
                }
                res.push((*input, shaped(input, dx)?));
            }
            Op::Mean(a) => {
                let n = val(a).len();
                let gv = g.item() / S::from_f64(n as f64);
                res.push((*a, Tensor::full(val(a).shape().to_vec(), gv)));
            }
            Op::Sum(a) => res.push((*a, Tensor::full(val(a).shape().to_vec(), g.item()))),
            Op::Relu(a) => {
                let dx = g.data().iter().zip(val(a).data()).map(|(&gi, &x)| if x > S::ZERO { gi } else { S::ZERO }).collect();
                res.push((*a, shaped(a, dx)?));
            }
            Op::Gelu(a) => {
                let r2 = S::from_f64(core::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = S::from_f64(0.398_942_280_401_432_7);
                let half = S::from_f64(0.5);
                let dx = g
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gi, &x)| {
                        let cdf = half * (S::ONE + (x * r2).erf());
                        let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
                        gi * (cdf + x * pdf)
                    })
                    .collect();
                res.push((*a, shaped(a, dx)?));
            }
            Op::Sigmoid(a) => {
                let dx = g.data().iter().zip(out.data()).map(|(&gi, &y)| gi * y * (S::ONE - y)).collect();
                res.push((*a, shaped(a, dx)?));
            }
            Op::MinMax { input, axis, argmin, argmax } => {
                let x = val(input).data();
                let (o, l, inn) = split_axis(val(input).shape(), *axis);
                let eps = S::from_f64(MINMAX_EPS);
                let mut dx = vec![S::ZERO; x.len()];
                for f in 0..o * inn {
                    let (oo, ii) = (f / inn, f % inn);
                    let base = oo * l * inn + ii;
                    let (lo, hi) = (argmin[f], argmax[f]);
                    let denom = x[hi] - x[lo] + eps;
                    let mut sum_g = S::ZERO;
                    let mut sum_gr = S::ZERO;
                    for a in 0..l {
                        let k = base + a * inn;
                        let gk = g.data()[k];
                        sum_g += gk;
                        sum_gr += gk * (x[k] - x[lo]);
                        dx[k] += gk / denom;
                    }
                    let d2 = denom * denom;
                    dx[lo] += -sum_g / denom + sum_gr / d2;
                    dx[hi] -= sum_gr / d2;
                }
                res.push((*input, shaped(input, dx)?));
            }
            Op::Dice { pred, gt } => {
                let (p, y) = (val(pred).data(), val(gt).data());
                let (inter, union) = dice_terms(p, y);
                let s = S::from_f64(DICE_SMOOTH);
                let two = S::from_f64(2.0);
                let (num, den) = (two * inter + s, union + s);
                let gs = g.item();
                let dp = p.iter().zip(y).map(|(&pp, &yy)| -gs * (two * yy * den - num * two * pp) / (den * den)).collect();
                let dy = p.iter().zip(y).map(|(&pp, &yy)| -gs * (two * pp * den - num * two * yy) / (den * den)).collect();
                res.push((*pred, shaped(pred, dp)?));
                res.push((*gt, shaped(gt, dy)?));
            }
            Op::Bce { pred, gt } => {
                let (p, y) = (val(pred).data(), val(gt).data());
                let c = S::from_f64(BCE_CLAMP);
                let nf = S::from_f64(p.len() as f64);
                let gs = g.item();
                let dp = p
                    .iter()
                    .zip(y)
                    .map(|(&pp, &yy)| {
                        if pp <= c || pp >= S::ONE - c {
                            S::ZERO
                        } else {
                            gs * (-yy / pp + (S::ONE - yy) / (S::ONE - pp)) / nf
                        }
                    })
                    .collect();
                let dy = p
                    .iter()
                    .map(|&pp| {
                        let q = pp.max(c).min(S::ONE - c);
                        gs * -(q.ln() - (S::ONE - q).ln()) / nf
                    })
                    .collect();
                res.push((*pred, shaped(pred, dp)?));
                res.push((*gt, shaped(gt, dy)?));
            }
        }
        Ok(res)
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn dice_terms<S: Scalar>(p: &[S], y: &[S]) -> (S, S) {
    let mut inter = S::ZERO;
    let mut union = S::ZERO;
    for (&pp, &yy) in p.iter().zip(y) {
        inter += pp * yy;
        union += pp * pp + yy * yy;
    }
    (inter, union)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(3));
        let xt = Tensor::from_fn([3, 4], |k| k as f64 * 0.5 - 1.0);
        let x = g.constant(xt.clone());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn resize_keeps_constants() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([2, 3, 5], 0.75));
        let y = g.resize(x, 7, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-7));
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(W·x) with x a column: dL/dW_ij = x_j
        let mut g = Graph::<f64>::new();
        let w = g.input(Tensor::from_fn([2, 3], |i| i as f64));
        let x = g.constant(Tensor::new([3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_operator() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_ops_record_nothing() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full([2, 2], 1.0));
        let b = g.softmax(a, 1).unwrap();
        let _ = g.sum(b);
        assert_eq!(g.recorded(), 0);
        let c = g.input(Tensor::full([2, 2], 1.0));
        let _ = g.mul(b, c).unwrap();
        assert_eq!(g.recorded(), 1);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 7.0);
    }
}
