//! Define-by-run computation graph.
//!
//! Every value produced during a forward pass is appended to a [`Graph`]. A node
//! carries an op record only when at least one of its inputs requires a
//! gradient, so inputs always precede their consumers and a single reverse sweep
//! over the append order is a valid backward pass.

use std::fmt;

use crate::error::{AutogradError, Result};
use crate::tensor::{axis_split, gemm, permute_data, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a user-supplied vector-Jacobian product.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output. `None` means
    /// the input receives no gradient.
    fn backward(
        &self,
        grad_output: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    LayerNorm { axis: usize, inv_std: Vec<f64> },
    Sigmoid,
    Tanh,
    Relu,
    Mean { axis: usize },
    Sum,
    Embedding { indices: Vec<usize> },
    CrossEntropy { targets: Vec<usize> },
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Mean { .. } => "mean",
            Op::Sum => "sum",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom(c) => c.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<(Op, Vec<Var>)>,
}

/// Append-only tape of values and the ops that produced them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]. Gradients are retained for leaves only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` is unreachable.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(AutogradError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(AutogradError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis < t.rank() {
        Ok(())
    } else {
        Err(AutogradError::Invalid(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            t.shape()
        )))
    }
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(src[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for j in 0..n {
                    out[at(j)] = src[at(j)] - max - lse;
                }
            } else {
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that participate in differentiation.
    pub fn tracked_len(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (trainable parameter or checked input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_op(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        check_finite(op.name(), &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then_some((op, inputs));
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        self.push_op(Op::MatMul, vec![a, b], Tensor::from_parts(vec![m, n], out))
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_op(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub, a, b, |x, y| x - y)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push_op(Op::Scale(factor), vec![a], value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let n: usize = shape.iter().product();
        if n != v.len() || shape.contains(&0) {
            return Err(AutogradError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push_op(Op::Reshape, vec![a], value)
    }

    /// Output axis `k` takes input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut seen = vec![false; v.rank()];
        let valid = perm.len() == v.rank()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(AutogradError::Invalid(format!(
                "permute: {perm:?} is not a permutation of the axes of {:?}",
                v.shape()
            )));
        }
        let (shape, data) = permute_data(v.shape(), v.data(), perm);
        self.push_op(Op::Permute(perm.to_vec()), vec![a], Tensor::from_parts(shape, data))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(AutogradError::Invalid(format!(
                "transpose: expected a matrix, got shape {:?}",
                self.shape(a)
            )));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutogradError::Invalid("concat: no inputs".into()))?;
        let base = self.value(first).shape().to_vec();
        check_axis("concat", self.value(first), axis)?;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push_op(
            Op::Concat { axis, sizes },
            parts.to_vec(),
            Tensor::from_parts(shape, out),
        )
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        check_axis("slice", v, axis)?;
        if len == 0 || start + len > v.shape()[axis] {
            return Err(AutogradError::Invalid(format!(
                "slice: range {start}..{} out of bounds for axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.push_op(Op::Slice { axis, start }, vec![a], Tensor::from_parts(shape, out))
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        if start != self.shape(a)[axis] {
            return Err(AutogradError::Invalid(format!(
                "split: sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape(a)
            )));
        }
        Ok(out)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.value(a), axis)?;
        let value = softmax_forward(self.value(a), axis, false);
        self.push_op(Op::Softmax { axis }, vec![a], value)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self.value(a), axis)?;
        let value = softmax_forward(self.value(a), axis, true);
        self.push_op(Op::LogSoftmax { axis }, vec![a], value)
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        check_axis("layer_norm", v, axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..n {
                    out[at(j)] = (src[at(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push_op(Op::LayerNorm { axis, inv_std }, vec![a], value)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        self.push_op(op, vec![a], value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Tanh, a, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Relu, a, |x| x.max(0.0))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        check_axis("mean", v, axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        for x in &mut out {
            *x /= n as f64;
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.push_op(Op::Mean { axis }, vec![a], Tensor::from_parts(shape, out))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_op(Op::Sum, vec![a], Tensor::scalar(s))
    }

    /// Gathers rows of a `(vocab, dim)` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || indices.is_empty() {
            return Err(AutogradError::Invalid(format!(
                "embedding: table must be a matrix and indices non-empty (table {:?})",
                t.shape()
            )));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return Err(AutogradError::Invalid(format!(
                    "embedding: index {i} out of range for vocabulary {vocab}"
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), dim], out);
        self.push_op(Op::Embedding { indices: indices.to_vec() }, vec![table], value)
    }

    /// Mean negative log-likelihood of `targets` under row distributions `probs` `(N, K)`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() != 2 || p.shape()[0] != targets.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "cross_entropy",
                lhs: p.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let k = p.shape()[1];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(AutogradError::Invalid(format!(
                    "cross_entropy: target {t} out of range for {k} classes"
                )));
            }
            total -= p.data()[i * k + t].ln();
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        self.push_op(Op::CrossEntropy { targets: targets.to_vec() }, vec![probs], value)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        self.push_op(Op::Custom(op), inputs.to_vec(), output)
    }

    /// `x · w + 1 · b` with `x (n×in)`, `w (in×out)`, `b (1×out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(x)[0];
        let ones = self.constant(Tensor::ones([rows, 1]));
        let bias = self.matmul(ones, b)?;
        self.add(xw, bias)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(AutogradError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some((op, inputs)) = &node.record else { continue };
            let Some(g) = grads[id].take() else { continue };
            let input_grads = self.op_backward(op, inputs, &node.value, &g)?;
            for (input, ig) in inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn op_backward(&self, op: &Op, inputs: &[Var], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |i: usize| self.value(inputs[i]);
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
        Ok(match op {
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, false);
                vec![Some(like(a, ga)), Some(like(b, gb))]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => {
                let neg = g.data().iter().map(|x| -x).collect();
                vec![Some(g.clone()), Some(like(g, neg))]
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                let ga = g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect();
                vec![Some(like(g, ga)), Some(like(g, gb))]
            }
            Op::Scale(f) => vec![Some(like(g, g.data().iter().map(|x| x * f).collect()))],
            Op::Reshape => vec![Some(like(val(0), g.data().to_vec()))],
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let (shape, data) = permute_data(g.shape(), g.data(), &inv);
                vec![Some(Tensor::from_parts(shape, data))]
            }
            Op::Concat { axis, sizes } => {
                let total: usize = sizes.iter().sum();
                let (outer, _, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(sizes.len());
                for (idx, &len) in sizes.iter().enumerate() {
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[from..from + len * inner]);
                    }
                    res.push(Some(like(val(idx), part)));
                    offset += len;
                }
                res
            }
            Op::Slice { axis, start } => {
                let a = val(0);
                let (outer, n, inner) = axis_split(a.shape(), *axis);
                let len = g.shape()[*axis];
                let mut full = vec![0.0; a.len()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    full[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                vec![Some(like(a, full))]
            }
            Op::Softmax { axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Some(like(out, gx))]
            }
            Op::LogSoftmax { axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = gd[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![Some(like(out, gx))]
            }
            Op::LayerNorm { axis, inv_std } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let (xhat, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; xhat.len()];
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mean_g = (0..n).map(|j| gd[at(j)]).sum::<f64>() / nf;
                        let mean_gx = (0..n).map(|j| gd[at(j)] * xhat[at(j)]).sum::<f64>() / nf;
                        let r = inv_std[o * inner + i];
                        for j in 0..n {
                            gx[at(j)] = r * (gd[at(j)] - mean_g - xhat[at(j)] * mean_gx);
                        }
                    }
                }
                vec![Some(like(out, gx))]
            }
            Op::Sigmoid => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![Some(like(out, d))]
            }
            Op::Tanh => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![Some(like(out, d))]
            }
            Op::Relu => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(0).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(like(out, d))]
            }
            Op::Mean { axis } => {
                let a = val(0);
                let (outer, n, inner) = axis_split(a.shape(), *axis);
                let mut gx = vec![0.0; a.len()];
                let scale = 1.0 / n as f64;
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                vec![Some(like(a, gx))]
            }
            Op::Sum => {
                let a = val(0);
                vec![Some(Tensor::full(a.shape().to_vec(), g.item()))]
            }
            Op::Embedding { indices } => {
                let t = val(0);
                let dim = t.shape()[1];
                let mut gt = vec![0.0; t.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..dim {
                        gt[i * dim + c] += g.data()[r * dim + c];
                    }
                }
                vec![Some(like(t, gt))]
            }
            Op::CrossEntropy { targets } => {
                let p = val(0);
                let k = p.shape()[1];
                let scale = g.item() / targets.len() as f64;
                let mut gp = vec![0.0; p.len()];
                for (i, &t) in targets.iter().enumerate() {
                    gp[i * k + t] = -scale / p.data()[i * k + t];
                }
                vec![Some(like(p, gp))]
            }
            Op::Custom(c) => {
                let ins: Vec<&Tensor> = (0..inputs.len()).map(val).collect();
                let res = c.backward(g, &ins, out)?;
                if res.len() != inputs.len() {
                    return Err(AutogradError::Invalid(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        c.name(),
                        res.len(),
                        inputs.len()
                    )));
                }
                res
            }
        })
    }
}
