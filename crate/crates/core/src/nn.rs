//! Parameterised layers. Each layer holds [`ParamId`]s into a
//! [`ParamStore`] and runs against the tape handles in a [`Bound`].

use crate::error::Result;
use crate::ops::reduce::LN_EPS;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-vector affine map `x·W + b` over the last axis; `W` is `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.weight(format!("{path}.weight"), &[fan_in, fan_out], rng)?,
            bias: store.bias(format!("{path}.bias"), fan_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// LayerNorm with a learnable per-feature affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{path}.weight"), Tensor::ones(&[dim]), false)?,
            beta: store.add(format!("{path}.bias"), Tensor::zeros(&[dim]), false)?,
        })
    }

    /// Normalise over `axis` (1 for `B×C×H×W`, 2 for `B×N×D`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, axis: usize) -> Result<Var> {
        tape.layer_norm(x, axis, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Dense `k×k`, weight `Cout×Cin×k×k`.
    Dense,
    /// One `k×k` filter per channel, weight `C×k×k`.
    Depthwise,
    /// `1×1`, weight `Cout×Cin`.
    Pointwise,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kind: ConvKind,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (shape, fan_out) = match kind {
            ConvKind::Dense => (vec![cout, cin, k, k], k * k * cout),
            ConvKind::Depthwise => (vec![cin, k, k], k * k),
            ConvKind::Pointwise => (vec![cout, cin], cout),
        };
        let std = (2.0 / fan_out as f64).sqrt();
        Ok(Self {
            kind,
            stride,
            weight: store.normal_weight(format!("{path}.weight"), &shape, std, rng)?,
            bias: store.bias(format!("{path}.bias"), *shape.first().expect("nonempty"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), p.var(self.bias));
        match self.kind {
            ConvKind::Dense => tape.conv2d(x, w, b, self.stride),
            ConvKind::Depthwise => tape.conv2d_depthwise_strided(x, w, b, self.stride),
            ConvKind::Pointwise => tape.conv2d_pointwise(x, w, b),
        }
    }
}

/// Convolution, channel LayerNorm, HardSwish.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNormAct {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y, 1)?;
        Ok(tape.hardswish(y))
    }
}
