use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{conv, elementwise, linalg, loss, norm, pool};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation together with whatever it saved for backward.
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPoolSpatial(Var),
    ResizeNearest(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        count: usize,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::AvgPoolSpatial(_) => "avgpool_spatial",
            Op::ResizeNearest(_) => "resize_nearest",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1 { .. } => "l1_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBroadcast(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul(a, b) | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::AvgPoolSpatial(x)
            | Op::ResizeNearest(x) => vec![*x],
            Op::Linear { x, w, b }
            | Op::Conv2d { x, w, b, .. }
            | Op::DepthwiseConv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::MaxPool2d { x, .. } | Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::L1 { pred, .. } => vec![*pred],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Gradient contributions produced by one node's backward step.
pub(crate) type Contributions<T> = Vec<(Var, Vec<T>)>;

/// Append-only record of executed operations.
///
/// Values are immutable once recorded. [`Graph::backward`] walks the record in
/// exact reverse order of insertion, so accumulation order is deterministic.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated on `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zero-filled when backward did not reach `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("grad buffer matches value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Records an op output after checking it is finite.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Clears every gradient buffer so backward may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = backward_node(&self.nodes, i, &g);
            self.nodes[i].grad = Some(g);
            for (var, delta) in contributions {
                let node = &mut self.nodes[var.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(buf) => {
                        for (b, d) in buf.iter_mut().zip(&delta) {
                            *b += *d;
                        }
                    }
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T]) -> Contributions<T> {
    let node = &nodes[i];
    let out = &node.value;
    let needs = |v: &Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => {
            let mut c = Vec::new();
            if needs(a) {
                c.push((*a, g.to_vec()));
            }
            if needs(b) {
                c.push((*b, g.to_vec()));
            }
            c
        }
        Op::Sub(a, b) => {
            let mut c = Vec::new();
            if needs(a) {
                c.push((*a, g.to_vec()));
            }
            if needs(b) {
                c.push((*b, g.iter().map(|&v| -v).collect()));
            }
            c
        }
        Op::Mul(a, b) => elementwise::mul_backward(nodes, *a, *b, g),
        Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
        Op::AddBroadcast(a, b) => elementwise::add_broadcast_backward(nodes, *a, *b, g),
        Op::Relu(x) => elementwise::relu_backward(nodes, *x, g),
        Op::Gelu(x) => elementwise::gelu_backward(nodes, *x, g),
        Op::Sigmoid(x) => vec![(
            *x,
            out.data()
                .iter()
                .zip(g)
                .map(|(&y, &gv)| gv * y * (T::one() - y))
                .collect(),
        )],
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute(x, perm) => elementwise::permute_backward(nodes, *x, perm, g),
        Op::Sum(x) => vec![(*x, vec![g[0]; nodes[x.0].value.numel()])],
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            vec![(*x, vec![g[0] / T::from_f64(n as f64); n])]
        }
        Op::MatMul(a, b) => linalg::matmul_backward(nodes, *a, *b, g),
        Op::Bmm { a, b, trans_b } => linalg::bmm_backward(nodes, *a, *b, *trans_b, g),
        Op::Linear { x, w, b } => linalg::linear_backward(nodes, *x, *w, *b, g),
        Op::Conv2d { x, w, b, stride, pad } => {
            conv::conv2d_backward(nodes, *x, *w, *b, *stride, *pad, out.shape(), g)
        }
        Op::DepthwiseConv2d { x, w, b, pad } => {
            conv::depthwise_backward(nodes, *x, *w, *b, *pad, g)
        }
        Op::MaxPool2d { x, argmax } => pool::maxpool_backward(nodes, *x, argmax, g),
        Op::AvgPoolSpatial(x) => pool::avgpool_backward(nodes, *x, g),
        Op::ResizeNearest(x) => pool::resize_backward(nodes, *x, out.shape(), g),
        Op::Softmax { x, axis } => norm::softmax_backward(out, *x, *axis, g),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            rstd,
        } => norm::layernorm_backward(nodes, *x, *gamma, *beta, *axis, xhat, rstd, g),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => loss::cross_entropy_backward(*logits, labels, probs, g),
        Op::L1 {
            pred,
            target,
            mask,
            count,
        } => loss::l1_backward(nodes, *pred, target, mask, *count, g),
    }
}
