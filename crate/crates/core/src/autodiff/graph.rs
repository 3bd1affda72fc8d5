//! Tape of recorded operations with reverse-mode gradients.
//!
//! Nodes are appended in creation order, so every node's inputs have
//! smaller ids. Backward walks the tape once from the end.

use super::tensor::axis_split;
use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    NormLast(Var),
    Clip(Var, f64, f64),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    BroadcastLeading(Var, usize),
    Reshape(Var),
    StopGradient(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Neg(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Square(a)
            | Tanh(a)
            | SumAxis(a, _)
            | MeanAxis(a, _)
            | MaxAxis(a, _, _)
            | SumAll(a)
            | MeanAll(a)
            | Softmax(a, _)
            | NormLast(a)
            | Clip(a, _, _)
            | Slice(a, _, _)
            | BroadcastLeading(a, _)
            | Reshape(a)
            | StopGradient(a) => vec![*a],
            Concat(parts, _) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `v`, or `None` when no
    /// gradient path reaches it. Intermediate gradients are released during
    /// the sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros shaped like `like` when the
    /// node received no gradient.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Recording tape. Build values with the op methods, then call
/// [`backward`](Graph::backward) on a scalar.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).div(self.value(b))?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(a).scale(c)?;
        Ok(self.push(out, Op::Scale(a, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(a).add_scalar(c)?;
        Ok(self.push(out, Op::AddScalar(a)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).neg();
        self.push(out, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).exp()?;
        Ok(self.push(out, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).log()?;
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).sqrt()?;
        Ok(self.push(out, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).square()?;
        Ok(self.push(out, Op::Square(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        self.push(out, Op::Tanh(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.value(a).sum_axis(axis)?;
        Ok(self.push(out, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.value(a).mean_axis(axis)?;
        Ok(self.push(out, Op::MeanAxis(a, axis)))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        let out = x.max_axis(axis)?;
        let arg = x.argmax_axis(axis)?;
        Ok(self.push(out, Op::MaxAxis(a, axis, arg)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_all());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean_all());
        self.push(out, Op::MeanAll(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.value(a).softmax_axis(axis)?;
        Ok(self.push(out, Op::Softmax(a, axis)))
    }

    /// Euclidean norm along the last axis.
    pub fn norm_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).norm_last()?;
        Ok(self.push(out, Op::NormLast(a)))
    }

    /// Elementwise clamp. The gradient is 1 strictly inside `(lo, hi)` and 0
    /// elsewhere, including on the bounds.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).clip(lo, hi);
        self.push(out, Op::Clip(a, lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let out = self.value(a).slice(axis, start, len)?;
        Ok(self.push(out, Op::Slice(a, axis, start)))
    }

    /// Repeats `a` under new leading axes; the only broadcasting supported.
    pub fn broadcast_leading(&mut self, a: Var, lead: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).broadcast_leading(lead)?;
        Ok(self.push(out, Op::BroadcastLeading(a, lead.len())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Identity in the forward pass; blocks every upstream gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient(a))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let bb = self.broadcast_leading(b, &[rows])?;
        self.add(xw, bb)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(TensorError::UnknownVar { id: loss.0 });
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(TensorError::Cycle { node: id });
                }
            }
            let contributions = self.local_grads(node, &upstream)?;
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let g = g.check_finite("backward")?;
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(upstream);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, up: &Tensor) -> Result<Vec<(Var, Tensor)>, TensorError> {
        use Op::*;
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        let out = match &node.op {
            Leaf | StopGradient(_) => vec![],
            Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Sub(a, b) => vec![(*a, up.clone()), (*b, up.neg())],
            Mul(a, b) => vec![(*a, up.mul(val(*b))?), (*b, up.mul(val(*a))?)],
            Div(a, b) => {
                let d = val(*b);
                let ga = up.div(d)?;
                let gb = up.mul(y)?.div(d)?.neg();
                vec![(*a, ga), (*b, gb)]
            }
            MatMul(a, b) => {
                let ga = up.matmul(&val(*b).transpose_last2()?)?;
                let gb = val(*a).transpose_last2()?.matmul(up)?;
                vec![(*a, ga), (*b, gb)]
            }
            Scale(a, c) => vec![(*a, up.scale(*c)?)],
            AddScalar(a) => vec![(*a, up.clone())],
            Neg(a) => vec![(*a, up.neg())],
            Exp(a) => vec![(*a, up.mul(y)?)],
            Log(a) => vec![(*a, up.div(val(*a))?)],
            Sqrt(a) => {
                let g = up.zip_with(y, "sqrt", |u, s| if s > 0.0 { u / (2.0 * s) } else { 0.0 })?;
                vec![(*a, g)]
            }
            Square(a) => vec![(*a, up.mul(val(*a))?.scale(2.0)?)],
            Tanh(a) => vec![(*a, up.zip_with(y, "tanh", |u, t| u * (1.0 - t * t))?)],
            SumAxis(a, axis) => vec![(*a, up.repeat_axis(*axis, val(*a).shape()[*axis])?)],
            MeanAxis(a, axis) => {
                let len = val(*a).shape()[*axis];
                vec![(*a, up.repeat_axis(*axis, len)?.scale(1.0 / len as f64)?)]
            }
            MaxAxis(a, axis, arg) => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut g = Tensor::zeros(x.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let k = arg[o * inner + i];
                        g.data_mut()[(o * len + k) * inner + i] = up.data()[o * inner + i];
                    }
                }
                vec![(*a, g)]
            }
            SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), up.data()[0]))],
            MeanAll(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), up.data()[0] / x.numel() as f64))]
            }
            Softmax(a, axis) => {
                let uy = up.mul(y)?;
                let dot = uy.sum_axis(*axis)?.repeat_axis(*axis, y.shape()[*axis])?;
                vec![(*a, uy.sub(&dot.mul(y)?)?)]
            }
            NormLast(a) => {
                let x = val(*a);
                let last = x.shape()[x.rank() - 1];
                let n = y.repeat_axis(y.rank(), last)?;
                let u = up.repeat_axis(up.rank(), last)?;
                let mut g = Tensor::zeros(x.shape());
                for (((gi, &xi), &ni), &ui) in g
                    .data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .zip(n.data())
                    .zip(u.data())
                {
                    *gi = if ni > 0.0 { ui * xi / ni } else { 0.0 };
                }
                vec![(*a, g)]
            }
            Clip(a, lo, hi) => {
                let g = up.zip_with(
                    val(*a),
                    "clip",
                    |u, x| {
                        if x > *lo && x < *hi {
                            u
                        } else {
                            0.0
                        }
                    },
                )?;
                vec![(*a, g)]
            }
            Concat(parts, axis) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    v.push((*p, up.slice(*axis, start, len)?));
                    start += len;
                }
                v
            }
            Slice(a, axis, start) => {
                let x = val(*a);
                let (outer, full, inner) = axis_split(x.shape(), *axis);
                let len = up.shape()[*axis];
                let mut g = Tensor::zeros(x.shape());
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    g.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&up.data()[src..src + len * inner]);
                }
                vec![(*a, g)]
            }
            BroadcastLeading(a, lead) => {
                let mut g = up.clone();
                for _ in 0..*lead {
                    g = g.sum_axis(0)?;
                }
                vec![(*a, g)]
            }
            Reshape(a) => vec![(*a, up.reshape(val(*a).shape())?)],
        };
        Ok(out)
    }
}
