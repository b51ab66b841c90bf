//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so parent ids always precede child ids and the backward
//! sweep is a plain reverse iteration. A graph supports exactly one call to
//! [`Graph::backward`].
//!
//! Broadcasting is limited to a leading batch dimension (`add_bcast`,
//! `broadcast`); every other shape change is an explicit `reshape`.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward and backward rules live outside this module.
///
/// Used for fused kernels (e.g. spline transforms) where expressing the
/// computation through primitive ops would be wasteful.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product. Returns one gradient buffer per input, each
    /// with the input's element count; `None` means no contribution.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Primitive operation tags accepted by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    /// `(rest) -> (batch, rest)`.
    Broadcast(usize),
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Softplus,
    Sigmoid,
    /// Stabilized log-sum-exp over the last axis.
    LogSumExp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddBcast(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulBcast(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    Broadcast(NodeId),
    Reshape(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    LogSumExp(NodeId),
    Pick {
        input: NodeId,
        indices: Vec<usize>,
    },
    Im2Col {
        input: NodeId,
        kernel: usize,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Gradients of the root with respect to every parameter leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    /// Gradients for `ids` in order; ids that are not parameters of this
    /// graph are an error.
    pub fn collect(&mut self, ids: &[NodeId]) -> Result<Vec<Tensor>> {
        ids.iter()
            .map(|id| {
                self.take(*id)
                    .ok_or_else(|| Error::Graph(format!("no gradient for node {}", id.0)))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Shape with the last axis removed; rank-1 inputs reduce to `[1]`.
fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m,n] += op(a)[m,k] * op(b)[k,n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, k, 1, b, n, 1, c);
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
fn matmul_bt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, k, 1, b, 1, k, c);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn matmul_at_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, 1, k, b, n, 1, c);
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

    /// A trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: grad,
            is_param: grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Constant subgraphs are folded: the value is kept but no op is recorded.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Dispatches a primitive operation by tag.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let unary = |inputs: &[NodeId]| -> Result<NodeId> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(Error::InvalidArgument(format!(
                    "{kind:?} takes one input, got {}",
                    inputs.len()
                ))),
            }
        };
        let binary = |inputs: &[NodeId]| -> Result<(NodeId, NodeId)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::InvalidArgument(format!(
                    "{kind:?} takes two inputs, got {}",
                    inputs.len()
                ))),
            }
        };
        match kind {
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                if self.shape(a) == self.shape(b) {
                    self.add(a, b)
                } else {
                    self.add_bcast(a, b)
                }
            }
            OpKind::Sub => {
                let (a, b) = binary(inputs)?;
                self.sub(a, b)
            }
            OpKind::Mul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Relu => self.relu(unary(inputs)?),
            OpKind::Exp => self.exp(unary(inputs)?),
            OpKind::Log => self.log(unary(inputs)?),
            OpKind::Sum => self.sum(unary(inputs)?),
            OpKind::Mean => self.mean(unary(inputs)?),
            OpKind::Broadcast(n) => self.broadcast(unary(inputs)?, *n),
            OpKind::Reshape(shape) => self.reshape(unary(inputs)?, shape),
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, end } => self.slice(unary(inputs)?, *axis, *start, *end),
            OpKind::Softplus => self.softplus(unary(inputs)?),
            OpKind::Sigmoid => self.sigmoid(unary(inputs)?),
            OpKind::LogSumExp => self.logsumexp(unary(inputs)?),
        }
    }

    fn zip_map(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn unary_map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals `a`'s shape without its leading axis.
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() < 2 || va.shape()[1..] != *vb.shape() {
            return Err(shape_err("add_bcast", va.shape(), vb.shape()));
        }
        let w = vb.numel();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(w) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add_bcast", v, Op::AddBcast(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `a * b` with `b` broadcast along `a`'s leading axis.
    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() < 2 || va.shape()[1..] != *vb.shape() {
            return Err(shape_err("mul_bcast", va.shape(), vb.shape()));
        }
        let w = vb.numel();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(w) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x *= y;
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul_bcast", v, Op::MulBcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.unary_map(a, |x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    /// `(m, k) x (k, n) -> (m, n)`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank 2, got {:?}",
                va.shape()
            )));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary_map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary_map(a, f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.unary_map(a, f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary_map(a, softplus);
        self.push("softplus", v, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary_map(a, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let v = Tensor::scalar(va.data().iter().sum::<f64>() / va.numel() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let w = *va.shape().last().unwrap();
        let data = va.data().chunks(w).map(|c| c.iter().sum()).collect();
        let v = Tensor::new(drop_last(va.shape()), data)?;
        self.push("sum_last", v, Op::SumLast(a), &[a])
    }

    /// Repeats `a` along a new leading axis of length `batch`.
    pub fn broadcast(&mut self, a: NodeId, batch: usize) -> Result<NodeId> {
        if batch == 0 {
            return Err(Error::Shape("broadcast to empty batch".into()));
        }
        let va = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(va.shape());
        let v = Tensor::new(shape, va.data().repeat(batch))?;
        self.push("broadcast", v, Op::Broadcast(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        self.push(
            "concat",
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&va.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let v = Tensor::new(out_shape, data)?;
        self.push(
            "slice",
            v,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            &[a],
        )
    }

    /// Row `i` of a matrix as shape `(1, cols)`.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.slice(a, 0, i, i + 1)
    }

    /// log-sum-exp over the last axis, stabilized by max subtraction.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let w = *va.shape().last().unwrap();
        let data = va
            .data()
            .chunks(w)
            .map(|c| {
                let m = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + c.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let v = Tensor::new(drop_last(va.shape()), data)?;
        self.push("logsumexp", v, Op::LogSumExp(a), &[a])
    }

    /// Selects `a[i, indices[i]]` from a `(rows, cols)` matrix.
    pub fn pick(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 || va.shape()[0] != indices.len() {
            return Err(Error::Shape(format!(
                "pick of {} indices from {:?}",
                indices.len(),
                va.shape()
            )));
        }
        let cols = va.shape()[1];
        if let Some(bad) = indices.iter().find(|&&j| j >= cols) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for {cols} columns"
            )));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| va.at(i, j))
            .collect();
        let v = Tensor::new(vec![indices.len()], data)?;
        self.push(
            "pick",
            v,
            Op::Pick {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    /// Patch extraction for a stride-1, unpadded square convolution.
    ///
    /// Input is `(batch, height, width, channels)`; output is
    /// `(batch * oh * ow, kernel * kernel * channels)` with columns ordered
    /// `(ky, kx, channel)`.
    pub fn im2col(&mut self, a: NodeId, kernel: usize) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 || kernel == 0 || s[1] < kernel || s[2] < kernel {
            return Err(Error::Shape(format!("im2col kernel {kernel} on {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h - kernel + 1, w - kernel + 1);
        let cols = kernel * kernel * c;
        let mut out = vec![0.0; b * oh * ow * cols];
        let x = va.data();
        for n in 0..b {
            for y in 0..oh {
                for xo in 0..ow {
                    let r = ((n * oh + y) * ow + xo) * cols;
                    for ky in 0..kernel {
                        let src = ((n * h + y + ky) * w + xo) * c;
                        let dst = r + ky * kernel * c;
                        out[dst..dst + kernel * c].copy_from_slice(&x[src..src + kernel * c]);
                    }
                }
            }
        }
        let v = Tensor::new(vec![b * oh * ow, cols], out)?;
        self.push("im2col", v, Op::Im2Col { input: a, kernel }, &[a])
    }

    /// Max pooling over `(batch, height, width, channels)`.
    pub fn maxpool2d(&mut self, a: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[1] < kernel || s[2] < kernel {
            return Err(Error::Shape(format!("maxpool kernel {kernel} on {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let x = va.data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for n in 0..b {
            for y in 0..oh {
                for xo in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let i = ((n * h + y * stride + ky) * w + xo * stride + kx) * c + ch;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let v = Tensor::new(vec![b, oh, ow, c], out)?;
        self.push("maxpool2d", v, Op::MaxPool { input: a, argmax }, &[a])
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let v = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
            op.forward(&vals)?
        };
        let name = op.name();
        self.push(
            name,
            v,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every parameter leaf gets an entry; leaves the root does not depend on
    /// get zeros. A graph can be differentiated only once.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if node.is_param {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let g = grads.get_mut(i).and_then(Option::take);
                let t = match g {
                    Some(d) => Tensor::new(node.value.shape().to_vec(), d)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(NodeId(i), t);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let n = nodes[id.0].value.numel();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let val = |id: NodeId| nodes[id.0].value.data();

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddBcast(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| {
                    let w = s.len();
                    for row in g.chunks(w) {
                        s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::MulBcast(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let w = vb.len();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i % w];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..g.len() {
                        s[i % w] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |s| matmul_bt_into(g, tb.data(), s, m, n, k));
                acc(*b, &mut |s| matmul_at_into(ta.data(), g, s, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        // Subgradient at exactly zero is zero.
                        if va[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let o = out.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * o[i];
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / va[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sigmoid(va[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let o = out.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * o[i] * (1.0 - o[i]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |s| {
                let c = g[0] / s.len() as f64;
                s.iter_mut().for_each(|x| *x += c);
            }),
            Op::SumLast(a) => {
                let w = *nodes[a.0].value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for (row, gv) in s.chunks_mut(w).zip(g) {
                        row.iter_mut().for_each(|x| *x += gv);
                    }
                });
            }
            Op::Broadcast(a) => acc(*a, &mut |s| {
                let w = s.len();
                for row in g.chunks(w) {
                    s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                s[dst + i] += g[src + i];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = axis_split(nodes[input.0].value.shape(), *axis);
                let width = out.shape()[*axis] * inner;
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        for i in 0..width {
                            s[dst + i] += g[o * width + i];
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let va = &nodes[a.0].value;
                let w = *va.shape().last().unwrap();
                let o = out.data();
                acc(*a, &mut |s| {
                    for (r, (srow, xrow)) in s.chunks_mut(w).zip(va.data().chunks(w)).enumerate() {
                        for (sv, xv) in srow.iter_mut().zip(xrow) {
                            *sv += g[r] * (xv - o[r]).exp();
                        }
                    }
                });
            }
            Op::Pick { input, indices } => {
                let cols = nodes[input.0].value.shape()[1];
                acc(*input, &mut |s| {
                    for (i, &j) in indices.iter().enumerate() {
                        s[i * cols + j] += g[i];
                    }
                });
            }
            Op::Im2Col { input, kernel } => {
                let sh = nodes[input.0].value.shape();
                let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
                let k = *kernel;
                let (oh, ow) = (h - k + 1, w - k + 1);
                let cols = k * k * c;
                acc(*input, &mut |s| {
                    for n in 0..b {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let r = ((n * oh + y) * ow + xo) * cols;
                                for ky in 0..k {
                                    let dst = ((n * h + y + ky) * w + xo) * c;
                                    let src = r + ky * k * c;
                                    for i in 0..k * c {
                                        s[dst + i] += g[src + i];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |s| {
                for (gv, &i) in g.iter().zip(argmax) {
                    s[i] += gv;
                }
            }),
            Op::Custom { op, inputs } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|i| &nodes[i.0].value).collect();
                let parts = op.backward(&vals, out, g);
                for (id, part) in inputs.iter().zip(parts) {
                    if let Some(p) = part {
                        acc(*id, &mut |s| {
                            s.iter_mut().zip(&p).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(m(2, 1, &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let l = g.logsumexp(a).unwrap();
        assert!((g.value(l).item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(3.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 4.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.exp(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_root_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn log_domain_and_overflow_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        let big = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(big), Err(Error::NonFinite(_))));
        let a = g.constant(m(2, 3, &[0.0; 6]));
        let b = g.constant(m(2, 3, &[0.0; 6]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.add(a, x), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // f(x) = x * x + 3x at x = 2 -> f' = 2x + 3 = 7
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let f = g.add(sq, lin).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn concat_and_slice_shapes() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(m(2, 1, &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let r = g.row(c, 1).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0, 6.0]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let p = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
    }
}
