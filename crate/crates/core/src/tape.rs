//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Every operation appends one node to a [`Tape`]. Node order is the
//! recording order, so operands always precede their results and the
//! backward sweep is a single reverse pass over the node list.

use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{conv::PoolKind, Backward};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    ScaleBatch,
    Matmul,
    Softmax,
    LayerNorm,
    Hardswish,
    Gelu,
    Sum,
    Mean,
    GlobalAvgPool,
    Conv2dDepthwise,
    Conv2dPointwise,
    Conv2d,
    Pool2d,
    Reshape,
    Permute,
    Narrow,
    Concat,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::ScaleBatch,
        OpKind::Matmul,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Hardswish,
        OpKind::Gelu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::GlobalAvgPool,
        OpKind::Conv2dDepthwise,
        OpKind::Conv2dPointwise,
        OpKind::Conv2d,
        OpKind::Pool2d,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::ScaleBatch => "scale_batch",
            OpKind::Matmul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Hardswish => "hardswish",
            OpKind::Gelu => "gelu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Conv2dDepthwise => "conv2d_depthwise",
            OpKind::Conv2dPointwise => "conv2d_pointwise",
            OpKind::Conv2d => "conv2d",
            OpKind::Pool2d => "pool2d",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Recorded operation with the operands and forward-pass caches its
/// backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    ScaleBatch {
        x: Var,
        factors: Vec<f64>,
    },
    Matmul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Hardswish(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Conv {
        kind: OpKind,
        x: Var,
        weight: Var,
        bias: Var,
        groups: usize,
        k: usize,
        stride: usize,
    },
    Pointwise {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        k: usize,
        /// Per output element: flat source index (min/max) or valid count (avg).
        cache: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::ScaleBatch { .. } => OpKind::ScaleBatch,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Hardswish(_) => OpKind::Hardswish,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Conv { kind, .. } => *kind,
            Op::Pointwise { .. } => OpKind::Conv2dPointwise,
            Op::Pool { .. } => OpKind::Pool2d,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Hardswish(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x) => vec![*x],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::ScaleBatch { x, .. }
            | Op::Softmax { x, .. }
            | Op::Pool { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv {
                x, weight, bias, ..
            }
            | Op::Pointwise { x, weight, bias } => {
                vec![*x, *weight, *bias]
            }
            Op::Concat { xs, .. } => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Operation recorder and gradient accumulator.
///
/// Leaves created with [`Tape::leaf`] keep their gradient across calls to
/// [`Tape::backward`]; repeated calls accumulate until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matmul and convolution forwards.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    /// Negate the backward rule of every node of `kind`. Used by negative
    /// controls of the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Propagate d(loss)/d(node) backwards and add the result into the
    /// gradient slot of every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(end, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..end).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(gout),
                }
                continue;
            }
            let sign = if self.fault == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            let contributions = Backward {
                nodes: &self.nodes,
                out: &node.value,
                gout: &gout,
            }
            .run(&node.op);
            for (v, mut g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if sign < 0.0 {
                    g.iter_mut().for_each(|x| *x = -*x);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_twice_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 12.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn injected_fault_negates_rule() {
        let mut tape = Tape::new();
        tape.inject_fault(OpKind::Mul);
        let x = tape.leaf(Tensor::new(&[1], vec![2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[-4.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
