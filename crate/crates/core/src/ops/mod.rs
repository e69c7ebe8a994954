//! Differentiable operations. Each submodule adds forward methods to
//! [`Tape`](crate::Tape) and the matching backward rules to [`Backward`].

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod reduce;
pub mod shape;

use crate::tape::{Node, Op, Var};
use crate::tensor::Tensor;

pub(crate) type Contributions = Vec<(Var, Vec<f64>)>;

/// Context for one node's backward rule: the recorded operand values, the
/// node's own forward output and the incoming gradient.
pub(crate) struct Backward<'a> {
    pub(crate) nodes: &'a [Node],
    pub(crate) out: &'a Tensor,
    pub(crate) gout: &'a [f64],
}

impl Backward<'_> {
    pub(crate) fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn run(&self, op: &Op) -> Contributions {
        match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => self.add(*a, *b),
            Op::Sub(a, b) => self.sub(*a, *b),
            Op::Mul(a, b) => self.mul(*a, *b),
            Op::Scale(x, c) => self.scale(*x, *c),
            Op::AddBias { x, bias, axis } => self.add_bias(*x, *bias, *axis),
            Op::ScaleBatch { x, factors } => self.scale_batch(*x, factors),
            Op::Hardswish(x) => self.hardswish(*x),
            Op::Gelu(x) => self.gelu(*x),
            Op::Matmul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                p,
            } => self.matmul(*a, *b, *trans_a, *trans_b, (*batch, *m, *k, *p)),
            Op::Softmax { x, axis } => self.softmax(*x, *axis),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => self.layer_norm(*x, *gamma, *beta, *axis, xhat, rstd),
            Op::Sum(x) => self.sum(*x),
            Op::Mean(x) => self.mean(*x),
            Op::GlobalAvgPool(x) => self.global_avg_pool(*x),
            Op::Conv {
                x,
                weight,
                bias,
                groups,
                k,
                stride,
                ..
            } => self.conv(*x, *weight, *bias, *groups, *k, *stride),
            Op::Pointwise { x, weight, bias } => self.pointwise(*x, *weight, *bias),
            Op::Pool { x, kind, k, cache } => self.pool(*x, *kind, *k, cache),
            Op::Reshape(x) => self.reshape(*x),
            Op::Permute { x, perm } => self.permute(*x, perm),
            Op::Narrow { x, axis, start } => self.narrow(*x, *axis, *start),
            Op::Concat { xs, axis } => self.concat(xs, *axis),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => self.cross_entropy(*logits, labels, probs),
        }
    }
}
