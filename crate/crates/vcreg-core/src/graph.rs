//! Reverse-mode autodiff on a flat tape.
//!
//! A [`Graph`] records one forward pass; node ids index into the tape in
//! insertion order, which is already a topological order, so `backward`
//! is a single reverse sweep. Every op validates shapes and rejects
//! non-finite outputs at creation time, and gradient accumulation checks
//! finiteness again, so NaN/Inf can never reach an optimizer step
//! unnoticed.
//!
//! [`Graph::custom_grad`] inserts a node whose forward is the identity and
//! whose backward maps `(input value, incoming gradient)` to the outgoing
//! gradient. This is the extension point used to inject analytically
//! computed regularizer gradients without touching the forward pass.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Maps `(input value, incoming gradient)` to the outgoing gradient.
pub type CustomGradFn = Box<dyn Fn(&Tensor, &Tensor) -> Result<Tensor>>;

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    SmoothL1 { input: NodeId, delta: f64 },
    Sum(NodeId),
    MeanAxis { input: NodeId, axis: usize },
    Reshape(NodeId),
    Transpose(NodeId),
    Diag(NodeId),
    SpatialFlatten(NodeId),
    GlobalAvgPool(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    CustomGrad { input: NodeId, grad_fn: CustomGradFn },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients per node after a backward sweep. Only leaf gradients are
/// retained; intermediate gradients are dropped once consumed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// Forward-only graph; `backward` is an error. Values are computed by
    /// the same code as the recording graph, so outputs are bit-identical.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            backward_done: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("output of {name}"),
            });
        }
        let id = NodeId(self.nodes.len());
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(id)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, masks).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let req = self.req(a) || self.req(b);
        self.push("matmul", value, Op::Matmul(a, b), req)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let req = self.req(a) || self.req(b);
        self.push("add", value, Op::Add(a, b), req)
    }

    /// Matrix plus a row vector broadcast over rows (bias add).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let value = broadcast_row(&self.nodes[a.0].value, &self.nodes[row.0].value, "add_row", |x, r| x + r)?;
        let req = self.req(a) || self.req(row);
        self.push("add_row", value, Op::AddRow(a, row), req)
    }

    /// Matrix minus a row vector broadcast over rows (batch centering).
    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let value = broadcast_row(&self.nodes[a.0].value, &self.nodes[row.0].value, "sub_row", |x, r| x - r)?;
        let req = self.req(a) || self.req(row);
        self.push("sub_row", value, Op::SubRow(a, row), req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, "mul", |x, y| x * y)?;
        let req = self.req(a) || self.req(b);
        self.push("mul", value, Op::Mul(a, b), req)
    }

    /// Matrix times a row vector broadcast over rows (per-column scaling).
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let value = broadcast_row(&self.nodes[a.0].value, &self.nodes[row.0].value, "mul_row", |x, r| x * r)?;
        let req = self.req(a) || self.req(row);
        self.push("mul_row", value, Op::MulRow(a, row), req)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.nodes[a.0].value.scale(c);
        let req = self.req(a);
        self.push("scale", value, Op::Scale(a, c), req)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let req = self.req(a);
        self.push("add_scalar", value, Op::AddScalar(a), req)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|x| 1.0 / x);
        let req = self.req(a);
        self.push("recip", value, Op::Recip(a), req)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let req = self.req(a);
        self.push("relu", value, Op::Relu(a), req)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|x| x * x);
        let req = self.req(a);
        self.push("square", value, Op::Square(a), req)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(fmath::sqrt);
        let req = self.req(a);
        self.push("sqrt", value, Op::Sqrt(a), req)
    }

    /// Elementwise smooth-L1: `x^2` for `|x| <= delta`, else `2*delta*|x| - delta^2`.
    pub fn smooth_l1(&mut self, a: NodeId, delta: f64) -> Result<NodeId> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParam {
                name: "delta",
                why: format!("must be positive, got {delta}"),
            });
        }
        let value = self.nodes[a.0].value.map(|x| {
            if x.abs() <= delta {
                x * x
            } else {
                2.0 * delta * x.abs() - delta * delta
            }
        });
        let req = self.req(a);
        self.push("smooth_l1", value, Op::SmoothL1 { input: a, delta }, req)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        let req = self.req(a);
        self.push("sum", Tensor::scalar(total), Op::Sum(a), req)
    }

    /// Mean along one axis; the axis disappears from the shape.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = mean_axis_value(&self.nodes[a.0].value, axis)?;
        let req = self.req(a);
        self.push("mean_axis", value, Op::MeanAxis { input: a, axis }, req)
    }

    /// Copying reshape.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let req = self.req(a);
        self.push("reshape", value, Op::Reshape(a), req)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.transposed2()?;
        let req = self.req(a);
        self.push("transpose", value, Op::Transpose(a), req)
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        if r != c {
            return Err(Error::Shape {
                op: "diag",
                detail: format!("matrix is {r}x{c}, not square"),
            });
        }
        let src = self.nodes[a.0].value.data();
        let data: Vec<f64> = (0..r).map(|i| src[i * c + i]).collect();
        let req = self.req(a);
        self.push("diag", Tensor::new(vec![r], data)?, Op::Diag(a), req)
    }

    /// `[n, c, h, w]` to `[n*h*w, c]`: one row per spatial location, rows
    /// ordered lexicographically by `(sample, row, col)`. Backward scatters
    /// gradients back through the exact inverse permutation.
    pub fn spatial_flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let value = spatial_flatten_value(&self.nodes[a.0].value)?;
        let req = self.req(a);
        self.push("spatial_flatten", value, Op::SpatialFlatten(a), req)
    }

    /// `[n, c, h, w]` to `[n, c]` by averaging each channel plane.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
        if h * w == 0 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                detail: format!("empty spatial extent {h}x{w}"),
            });
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; n * c];
        let plane = h * w;
        for i in 0..n * c {
            let s: f64 = src[i * plane..(i + 1) * plane].iter().sum();
            data[i] = s / plane as f64;
        }
        let req = self.req(a);
        self.push(
            "global_avg_pool",
            Tensor::new(vec![n, c], data)?,
            Op::GlobalAvgPool(a),
            req,
        )
    }

    /// 2-d convolution: input `[n, ci, h, w]`, weight `[co, ci, kh, kw]`,
    /// bias `[co]`, with symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = conv2d_value(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            stride,
            pad,
        )?;
        let req = self.req(input) || self.req(weight) || self.req(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            req,
        )
    }

    /// Mean cross-entropy between `logits` rows and integer labels, as a
    /// rank-0 scalar. Stable via log-sum-exp with `ln_1p` on the residual.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = self.nodes[logits.0].value.dims2()?;
        if n == 0 {
            return Err(Error::BatchTooSmall { n: 0, needed: 1 });
        }
        if labels.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{n} logit rows vs {} labels", labels.len()),
            });
        }
        for (i, &lab) in labels.iter().enumerate() {
            if lab >= k {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: lab,
                    classes: k,
                });
            }
        }
        let data = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let (jmax, m) = row_max(row);
            let mut rest = 0.0;
            for (j, &l) in row.iter().enumerate() {
                if j != jmax {
                    rest += fmath::exp(l - m);
                }
            }
            let lse = m + fmath::ln_1p(rest);
            total += lse - row[labels[i]];
        }
        let req = self.req(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            req,
        )
    }

    /// Identity forward; `grad_fn(input value, incoming gradient)` supplies
    /// the outgoing gradient during backward. The callback runs exactly
    /// once per backward sweep.
    pub fn custom_grad(&mut self, input: NodeId, grad_fn: CustomGradFn) -> Result<NodeId> {
        let value = self.nodes[input.0].value.clone();
        let req = self.req(input);
        self.push(
            "custom_grad",
            value,
            Op::CustomGrad { input, grad_fn },
            req,
        )
    }

    /// Reverse sweep from a scalar loss. Returns gradients for leaf nodes;
    /// consumable once per forward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::GradDisabled);
        }
        if self.backward_done {
            return Err(Error::BackwardConsumed);
        }
        let loss_shape = self.nodes[loss.0].value.shape();
        if !loss_shape.is_empty() {
            return Err(Error::NotScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.req(*a) {
                    self.accum(grads, *a, g.matmul_nt(bv)?, "matmul")?;
                }
                if self.req(*b) {
                    self.accum(grads, *b, av.matmul_tn(g)?, "matmul")?;
                }
            }
            Op::Add(a, b) => {
                if self.req(*a) {
                    self.accum(grads, *a, g.clone(), "add")?;
                }
                if self.req(*b) {
                    self.accum(grads, *b, g.clone(), "add")?;
                }
            }
            Op::AddRow(a, row) => {
                if self.req(*a) {
                    self.accum(grads, *a, g.clone(), "add_row")?;
                }
                if self.req(*row) {
                    self.accum(grads, *row, column_sums(g), "add_row")?;
                }
            }
            Op::SubRow(a, row) => {
                if self.req(*a) {
                    self.accum(grads, *a, g.clone(), "sub_row")?;
                }
                if self.req(*row) {
                    self.accum(grads, *row, column_sums(g).scale(-1.0), "sub_row")?;
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.req(*a) {
                    self.accum(grads, *a, g.zip_map(bv, "mul", |x, y| x * y)?, "mul")?;
                }
                if self.req(*b) {
                    self.accum(grads, *b, g.zip_map(av, "mul", |x, y| x * y)?, "mul")?;
                }
            }
            Op::MulRow(a, row) => {
                let av = &self.nodes[a.0].value;
                let rv = &self.nodes[row.0].value;
                if self.req(*a) {
                    self.accum(grads, *a, broadcast_row(g, rv, "mul_row", |x, r| x * r)?, "mul_row")?;
                }
                if self.req(*row) {
                    let prod = g.zip_map(av, "mul_row", |x, y| x * y)?;
                    self.accum(grads, *row, column_sums(&prod), "mul_row")?;
                }
            }
            Op::Scale(a, c) => {
                if self.req(*a) {
                    self.accum(grads, *a, g.scale(*c), "scale")?;
                }
            }
            Op::AddScalar(a) => {
                if self.req(*a) {
                    self.accum(grads, *a, g.clone(), "add_scalar")?;
                }
            }
            Op::Recip(a) => {
                if self.req(*a) {
                    // d(1/x)/dx = -1/x^2 = -value^2
                    let contrib = g.zip_map(&node.value, "recip", |gi, v| -gi * v * v)?;
                    self.accum(grads, *a, contrib, "recip")?;
                }
            }
            Op::Relu(a) => {
                if self.req(*a) {
                    // Subgradient 0 at the kink.
                    let av = &self.nodes[a.0].value;
                    let contrib = g.zip_map(av, "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                    self.accum(grads, *a, contrib, "relu")?;
                }
            }
            Op::Square(a) => {
                if self.req(*a) {
                    let av = &self.nodes[a.0].value;
                    let contrib = g.zip_map(av, "square", |gi, x| gi * 2.0 * x)?;
                    self.accum(grads, *a, contrib, "square")?;
                }
            }
            Op::Sqrt(a) => {
                if self.req(*a) {
                    let contrib = g.zip_map(&node.value, "sqrt", |gi, v| gi * 0.5 / v)?;
                    self.accum(grads, *a, contrib, "sqrt")?;
                }
            }
            Op::SmoothL1 { input, delta } => {
                if self.req(*input) {
                    let av = &self.nodes[input.0].value;
                    let d = *delta;
                    // Derivative 2x clamped to [-2d, 2d]; continuous at the knee.
                    let contrib = g.zip_map(av, "smooth_l1", |gi, x| {
                        gi * (2.0 * x).clamp(-2.0 * d, 2.0 * d)
                    })?;
                    self.accum(grads, *input, contrib, "smooth_l1")?;
                }
            }
            Op::Sum(a) => {
                if self.req(*a) {
                    let gv = g.scalar_value()?;
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accum(grads, *a, Tensor::full(&shape, gv), "sum")?;
                }
            }
            Op::MeanAxis { input, axis } => {
                if self.req(*input) {
                    let contrib = mean_axis_backward(&self.nodes[input.0].value, *axis, g)?;
                    self.accum(grads, *input, contrib, "mean_axis")?;
                }
            }
            Op::Reshape(a) => {
                if self.req(*a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accum(grads, *a, g.reshaped(&shape)?, "reshape")?;
                }
            }
            Op::Transpose(a) => {
                if self.req(*a) {
                    self.accum(grads, *a, g.transposed2()?, "transpose")?;
                }
            }
            Op::Diag(a) => {
                if self.req(*a) {
                    let d = g.shape()[0];
                    let mut data = vec![0.0; d * d];
                    for i in 0..d {
                        data[i * d + i] = g.data()[i];
                    }
                    self.accum(grads, *a, Tensor::new(vec![d, d], data)?, "diag")?;
                }
            }
            Op::SpatialFlatten(a) => {
                if self.req(*a) {
                    let contrib = spatial_flatten_backward(&self.nodes[a.0].value, g)?;
                    self.accum(grads, *a, contrib, "spatial_flatten")?;
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.req(*a) {
                    let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
                    let plane = h * w;
                    let inv = 1.0 / plane as f64;
                    let mut data = vec![0.0; n * c * plane];
                    for i in 0..n * c {
                        let gv = g.data()[i] * inv;
                        for p in 0..plane {
                            data[i * plane + p] = gv;
                        }
                    }
                    self.accum(grads, *a, Tensor::new(vec![n, c, h, w], data)?, "global_avg_pool")?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    *stride,
                    *pad,
                )?;
                if self.req(*input) {
                    self.accum(grads, *input, gi, "conv2d")?;
                }
                if self.req(*weight) {
                    self.accum(grads, *weight, gw, "conv2d")?;
                }
                if self.req(*bias) {
                    self.accum(grads, *bias, gb, "conv2d")?;
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.req(*logits) {
                    let gv = g.scalar_value()?;
                    let lv = &self.nodes[logits.0].value;
                    let (n, k) = lv.dims2()?;
                    let data = lv.data();
                    let mut out = vec![0.0; n * k];
                    let scale = gv / n as f64;
                    for i in 0..n {
                        let row = &data[i * k..(i + 1) * k];
                        let (jmax, m) = row_max(row);
                        let mut rest = 0.0;
                        for (j, &l) in row.iter().enumerate() {
                            if j != jmax {
                                rest += fmath::exp(l - m);
                            }
                        }
                        let lse = m + fmath::ln_1p(rest);
                        for j in 0..k {
                            let soft = fmath::exp(row[j] - lse);
                            let ind = if j == labels[i] { 1.0 } else { 0.0 };
                            out[i * k + j] = (soft - ind) * scale;
                        }
                    }
                    self.accum(grads, *logits, Tensor::new(vec![n, k], out)?, "softmax_cross_entropy")?;
                }
            }
            Op::CustomGrad { input, grad_fn } => {
                if self.req(*input) {
                    let iv = &self.nodes[input.0].value;
                    let out = grad_fn(iv, g)?;
                    if out.shape() != iv.shape() {
                        return Err(Error::Shape {
                            op: "custom_grad",
                            detail: format!(
                                "callback returned shape {:?}, input is {:?}",
                                out.shape(),
                                iv.shape()
                            ),
                        });
                    }
                    self.accum(grads, *input, out, "custom_grad")?;
                }
            }
        }
        Ok(())
    }

    fn accum(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        contrib: Tensor,
        op: &'static str,
    ) -> Result<()> {
        if !contrib.all_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {op}"),
            });
        }
        match &mut grads[id.0] {
            Some(existing) => {
                let dst = existing.data_mut();
                for (d, s) in dst.iter_mut().zip(contrib.data()) {
                    *d += s;
                }
            }
            None => grads[id.0] = Some(contrib),
        }
        Ok(())
    }
}

fn row_max(row: &[f64]) -> (usize, f64) {
    let mut jmax = 0;
    let mut m = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > m {
            m = v;
            jmax = j;
        }
    }
    (jmax, m)
}

fn broadcast_row(
    a: &Tensor,
    row: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    if row.shape() != [d] {
        return Err(Error::Shape {
            op,
            detail: format!("matrix [{n}, {d}] vs row {:?}", row.shape()),
        });
    }
    let mut data = vec![0.0; n * d];
    let rv = row.data();
    let av = a.data();
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] = f(av[i * d + j], rv[j]);
        }
    }
    Tensor::new(vec![n, d], data)
}

fn column_sums(g: &Tensor) -> Tensor {
    let (n, d) = (g.shape()[0], g.shape()[1]);
    let mut out = vec![0.0; d];
    let data = g.data();
    for i in 0..n {
        for j in 0..d {
            out[j] += data[i * d + j];
        }
    }
    Tensor::new(vec![d], out).expect("column sum shape")
}

fn mean_axis_value(t: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(Error::Shape {
            op: "mean_axis",
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let ext = shape[axis];
    if ext == 0 {
        return Err(Error::Shape {
            op: "mean_axis",
            detail: format!("axis {axis} has zero extent"),
        });
    }
    let pre: usize = shape[..axis].iter().product();
    let post: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let mut out = vec![0.0; pre * post];
    let data = t.data();
    for o in 0..pre {
        for x in 0..ext {
            let base = (o * ext + x) * post;
            let obase = o * post;
            for i in 0..post {
                out[obase + i] += data[base + i];
            }
        }
    }
    let inv = 1.0 / ext as f64;
    for v in &mut out {
        *v *= inv;
    }
    Tensor::new(out_shape, out)
}

fn mean_axis_backward(input: &Tensor, axis: usize, g: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    let ext = shape[axis];
    let pre: usize = shape[..axis].iter().product();
    let post: usize = shape[axis + 1..].iter().product();
    let inv = 1.0 / ext as f64;
    let mut data = vec![0.0; input.numel()];
    let gd = g.data();
    for o in 0..pre {
        for x in 0..ext {
            let base = (o * ext + x) * post;
            let obase = o * post;
            for i in 0..post {
                data[base + i] = gd[obase + i] * inv;
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

fn spatial_flatten_value(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let src = t.data();
    let mut data = vec![0.0; n * h * w * c];
    let mut row = 0;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    data[row * c + ci] = src[((ni * c + ci) * h + hi) * w + wi];
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![n * h * w, c], data)
}

fn spatial_flatten_backward(input: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let gd = g.data();
    let mut data = vec![0.0; n * c * h * w];
    let mut row = 0;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    data[((ni * c + ci) * h + hi) * w + wi] = gd[row * c + ci];
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

fn conv2d_value(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, ciw, kh, kw) = weight.dims4()?;
    if ciw != ci {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("input channels {ci} vs weight channels {ciw}"),
        });
    }
    if bias.shape() != [co] {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("bias {:?} vs {co} output channels", bias.shape()),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidParam {
            name: "stride",
            why: "must be at least 1".into(),
        });
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let src = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0; n * co * ho * wo];
    for ni in 0..n {
        for coi in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bd[coi];
                    for cii in 0..ci {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += src[((ni * ci + cii) * h + iy) * w + ix]
                                    * wd[((coi * ci + cii) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * co + coi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, _, kh, kw) = weight.dims4()?;
    let (_, _, ho, wo) = g.dims4()?;
    let src = input.data();
    let wd = weight.data();
    let gd = g.data();
    let mut gi = vec![0.0; n * ci * h * w];
    let mut gw = vec![0.0; co * ci * kh * kw];
    let mut gb = vec![0.0; co];
    for ni in 0..n {
        for coi in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gd[((ni * co + coi) * ho + oy) * wo + ox];
                    gb[coi] += gv;
                    for cii in 0..ci {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                let si = ((ni * ci + cii) * h + iy) * w + ix;
                                let wi = ((coi * ci + cii) * kh + ky) * kw + kx;
                                gi[si] += gv * wd[wi];
                                gw[wi] += gv * src[si];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![n, ci, h, w], gi)?,
        Tensor::new(vec![co, ci, kh, kw], gw)?,
        Tensor::new(vec![co], gb)?,
    ))
}
