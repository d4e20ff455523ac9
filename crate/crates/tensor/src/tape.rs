//! Define-by-run reverse-mode tape.
//!
//! Every op appends one node holding its output value and the record needed
//! by its adjoint. Nodes are created in topological order, so `backward` is a
//! single reverse sweep; fan-out is handled by additive accumulation.

use std::fmt;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::ops::activation::Activation;
use crate::ops::conv::{conv2d_backward, conv2d_forward, Conv2dParams};
use crate::ops::elementwise::{binary, mul_broadcast, reduce_to_shape, BinaryOp};
use crate::ops::norm::{
    batchnorm2d_backward, batchnorm2d_forward, spatial_mean, spatial_std, BatchNormConfig, RunningStats,
};
use crate::ops::shape::{bmm, concat, narrow, narrow_backward};
use crate::ops::softmax::{soft_cross_entropy, softmax, softmax_backward};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// `backward` receives the input values, the output value and the upstream
/// gradient, and returns one optional gradient per input.
pub trait CustomOp<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Element> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, p: Conv2dParams },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Tensor<T>, inv_std: Vec<T>, training: bool },
    Act { x: Var, kind: Activation },
    Softmax { x: Var, axis: usize },
    SpatialMean { x: Var },
    SpatialStd { x: Var },
    Binary { a: Var, b: Var, op: BinaryOp },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Bmm { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Gather { table: Var, index: Vec<usize> },
    SoftCrossEntropy { logits: Var, targets: Tensor<T>, probs: Tensor<T> },
    Sum { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Act { kind, .. } => kind.name(),
            Op::Softmax { .. } => "softmax",
            Op::SpatialMean { .. } => "spatial_mean",
            Op::SpatialStd { .. } => "spatial_std",
            Op::Binary { .. } => "binary",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Bmm { .. } => "bmm",
            Op::Gather { .. } => "gather",
            Op::SoftCrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Act { x, .. }
            | Op::Softmax { x, .. }
            | Op::SpatialMean { x }
            | Op::SpatialStd { x }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![*x],
            Op::Binary { a, b, .. } | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        self.push(y, Op::Conv2d { x, w, b, p })
    }

    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let f = batchnorm2d_forward(self.value(x), self.value(gamma), self.value(beta), stats, cfg)?;
        self.push(
            f.y,
            Op::BatchNorm { x, gamma, beta, x_hat: f.x_hat, inv_std: f.inv_std, training: cfg.training },
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = self.value(x).map(|v| kind.apply(v));
        self.push(y, Op::Act { x, kind })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = softmax(self.value(x), axis)?;
        self.push(y, Op::Softmax { x, axis })
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let y = spatial_mean(self.value(x))?;
        self.push(y, Op::SpatialMean { x })
    }

    /// `[n, c, h, w] -> [n, c]` of `sqrt(var + eps)`.
    pub fn spatial_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let y = spatial_std(self.value(x), eps)?;
        self.push(y, Op::SpatialStd { x })
    }

    /// Per-channel spatial `(mean, std)`, each `[n, c]`.
    pub fn channel_stats(&mut self, x: Var, eps: f64) -> Result<(Var, Var)> {
        Ok((self.spatial_mean(x)?, self.spatial_std(x, eps)?))
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, _, _) = self.value(x).dims4()?;
        let m = self.spatial_mean(x)?;
        self.reshape(m, &[n, c, 1, 1])
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let y = binary(op, self.value(a), self.value(b))?;
        self.push(y, Op::Binary { a, b, op })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar { x })
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = narrow(self.value(x), axis, start, len)?;
        self.push(y, Op::Narrow { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let y = {
            let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
            concat(&vals, axis)?
        };
        self.push(y, Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape { x })
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let y = bmm(self.value(a), self.value(b), trans_a, trans_b)?;
        self.push(y, Op::Bmm { a, b, trans_a, trans_b })
    }

    /// `out[i] = table.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return shape_err("gather", format!("index {bad} out of {} entries", t.numel()));
        }
        let y = Tensor::new(shape, index.iter().map(|&i| t.data()[i]).collect())?;
        self.push(y, Op::Gather { table, index })
    }

    /// Mean soft-target cross-entropy of `[n, k]` logits.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let (loss, probs) = soft_cross_entropy(self.value(logits), &targets)?;
        self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, targets, probs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_f64_lossy(n as f64))
    }

    /// Appends the output of an externally defined op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a scalar `loss`. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.node_backward(node, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, p } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), b.is_some(), g, *p, self.wants(*x), self.wants(*w))?;
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, training } => {
                let (dx, dg, db) = batchnorm2d_backward(g, x_hat, self.value(*gamma), inv_std, *training)?;
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                out.push((*x, g.zip_map(xv, |gi, xi| gi * kind.derivative(xi))));
            }
            Op::Softmax { x, axis } => out.push((*x, softmax_backward(y, g, *axis)?)),
            Op::SpatialMean { x } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4()?;
                let plane = h * w;
                let inv = T::one() / T::from_f64_lossy(plane as f64);
                let dx = Tensor::from_fn(xv.shape(), |i| g.data()[i / plane] * inv);
                out.push((*x, dx));
            }
            Op::SpatialStd { x } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4()?;
                let plane = h * w;
                let means = spatial_mean(xv)?;
                let inv = T::one() / T::from_f64_lossy(plane as f64);
                let dx = Tensor::from_fn(xv.shape(), |i| {
                    let c = i / plane;
                    g.data()[c] * (xv.data()[i] - means.data()[c]) * inv / y.data()[c]
                });
                out.push((*x, dx));
            }
            Op::Binary { a, b, op } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match op {
                    BinaryOp::Add => {
                        out.push((*a, reduce_to_shape(g, av.shape())?));
                        out.push((*b, reduce_to_shape(g, bv.shape())?));
                    }
                    BinaryOp::Sub => {
                        out.push((*a, reduce_to_shape(g, av.shape())?));
                        out.push((*b, reduce_to_shape(&g.map(|v| -v), bv.shape())?));
                    }
                    BinaryOp::Mul => {
                        if self.wants(*a) {
                            out.push((*a, reduce_to_shape(&mul_broadcast(g, bv)?, av.shape())?));
                        }
                        if self.wants(*b) {
                            out.push((*b, reduce_to_shape(&mul_broadcast(g, av)?, bv.shape())?));
                        }
                    }
                    BinaryOp::Div => {
                        if self.wants(*a) {
                            let q = binary(BinaryOp::Div, g, bv)?;
                            out.push((*a, reduce_to_shape(&q, av.shape())?));
                        }
                        if self.wants(*b) {
                            // d(a/b)/db = -y / b
                            let t = binary(BinaryOp::Div, &g.zip_map(y, |gi, yi| -gi * yi), bv)?;
                            out.push((*b, reduce_to_shape(&t, bv.shape())?));
                        }
                    }
                }
            }
            Op::Scale { x, factor } => out.push((*x, g.map(|v| v * *factor))),
            Op::AddScalar { x } | Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(self.value(*x).shape())?));
            }
            Op::Narrow { x, axis, start } => {
                out.push((*x, narrow_backward(g, self.value(*x).shape(), *axis, *start)?));
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &v in xs {
                    let len = self.value(v).shape()[*axis];
                    out.push((v, narrow(g, *axis, start, len)?));
                    start += len;
                }
            }
            Op::Bmm { a, b, trans_a, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = match (trans_a, trans_b) {
                    (false, false) => (bmm(g, bv, false, true)?, bmm(av, g, true, false)?),
                    (true, false) => (bmm(bv, g, false, true)?, bmm(av, g, false, false)?),
                    (false, true) => (bmm(g, bv, false, false)?, bmm(g, av, true, false)?),
                    (true, true) => (bmm(bv, g, true, true)?, bmm(g, av, true, true)?),
                };
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Gather { table, index } => {
                let mut dt = Tensor::zeros(self.value(*table).shape());
                let d = dt.data_mut();
                for (i, &src) in index.iter().enumerate() {
                    d[src] = d[src] + g.data()[i];
                }
                out.push((*table, dt));
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let n = T::from_f64_lossy(probs.shape()[0] as f64);
                let up = g.item();
                out.push((*logits, probs.zip_map(targets, |p, t| (p - t) * up / n)));
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                out.push((*x, Tensor::full(xv.shape(), g.item())));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&vals, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.value(v).shape() {
                            return Err(TensorError::Contract(format!(
                                "{} gradient shape {:?} for input {:?}",
                                op.name(),
                                gi.shape(),
                                self.value(v).shape()
                            )));
                        }
                        out.push((v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}
