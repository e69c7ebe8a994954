//! Group-mix attention block.
//!
//! Q/K/V are split channel-wise into five segments. Four of them pass
//! through aggregators (identity, 3×3, 5×5, 7×7 by default) that turn each
//! token into a proxy for its neighbourhood, and are then attended over
//! jointly. The fifth is aggregated without attention. A token ensemble
//! layer fuses both paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvKind, Linear, Norm};
use crate::ops::conv::PoolKind;
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

/// Number of channel segments Q/K/V are split into.
pub const SEGMENTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    DepthwiseConv,
    MinPool,
    MaxPool,
    AvgPool,
    Identity,
}

impl AggregatorKind {
    pub fn pool(self) -> Option<PoolKind> {
        match self {
            Self::MinPool => Some(PoolKind::Min),
            Self::MaxPool => Some(PoolKind::Max),
            Self::AvgPool => Some(PoolKind::Avg),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::DepthwiseConv => "depthwise-conv",
            Self::MinPool => "min-pool",
            Self::MaxPool => "max-pool",
            Self::AvgPool => "avg-pool",
            Self::Identity => "identity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    pub kernel: usize,
}

impl AggregatorSpec {
    pub const IDENTITY: Self = Self {
        kind: AggregatorKind::Identity,
        kernel: 1,
    };

    pub fn conv(kernel: usize) -> Self {
        Self {
            kind: AggregatorKind::DepthwiseConv,
            kernel,
        }
    }

    pub fn new(kind: AggregatorKind, kernel: usize) -> Self {
        if kind == AggregatorKind::Identity {
            Self::IDENTITY
        } else {
            Self { kind, kernel }
        }
    }

    /// Convolutional aggregators mix channels with a pointwise map afterwards.
    pub fn followed_by_pointwise(&self) -> bool {
        self.kind == AggregatorKind::DepthwiseConv
    }

    pub fn is_identity(&self) -> bool {
        self.kind == AggregatorKind::Identity
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            AggregatorKind::Identity => self.kernel == 1,
            _ => matches!(self.kernel, 3 | 5 | 7 | 9),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "aggregator {} does not accept kernel {}",
                self.kind.name(),
                self.kernel
            )))
        }
    }

    /// Parameters for `channels` input channels.
    pub fn param_count(&self, channels: usize) -> usize {
        if self.followed_by_pointwise() {
            channels * self.kernel * self.kernel + channels + channels * channels + channels
        } else {
            0
        }
    }

    /// Multiply-adds per token for `channels` channels.
    pub fn macs_per_token(&self, channels: usize) -> usize {
        if self.followed_by_pointwise() {
            channels * self.kernel * self.kernel + channels * channels
        } else {
            0
        }
    }
}

impl std::fmt::Display for AggregatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_identity() {
            write!(f, "identity")
        } else {
            write!(f, "{}{}x{}", self.kind.name(), self.kernel, self.kernel)
        }
    }
}

/// Aggregators for the four pre-attention segments and the non-attention one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchPlan {
    pub pre_attention: [AggregatorSpec; 4],
    pub non_attention: AggregatorSpec,
}

impl Default for BranchPlan {
    fn default() -> Self {
        Self {
            pre_attention: [
                AggregatorSpec::IDENTITY,
                AggregatorSpec::conv(3),
                AggregatorSpec::conv(5),
                AggregatorSpec::conv(7),
            ],
            non_attention: AggregatorSpec::conv(3),
        }
    }
}

impl BranchPlan {
    pub fn all_identity() -> Self {
        Self {
            pre_attention: [AggregatorSpec::IDENTITY; 4],
            non_attention: AggregatorSpec::IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for spec in &self.pre_attention {
            spec.validate()?;
        }
        self.non_attention.validate()?;
        if !matches!(
            self.non_attention.kind,
            AggregatorKind::DepthwiseConv | AggregatorKind::Identity
        ) {
            return Err(Error::config(format!(
                "non-attention aggregator must be depthwise-conv or identity, got {}",
                self.non_attention.kind.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmaConfig {
    pub dim: usize,
    pub heads: usize,
    pub plan: BranchPlan,
    /// Apply the softmax to the `d×d` context instead of over the key positions.
    pub softmax_on_context: bool,
}

impl GmaConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            plan: BranchPlan::default(),
            softmax_on_context: false,
        }
    }

    pub fn segment(&self) -> usize {
        self.dim / SEGMENTS
    }

    /// Channels entering attention.
    pub fn attn_dim(&self) -> usize {
        4 * self.segment()
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim() / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(SEGMENTS) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {SEGMENTS}",
                self.dim
            )));
        }
        if self.heads == 0 || !self.attn_dim().is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "attention width {} is not divisible by {} heads",
                self.attn_dim(),
                self.heads
            )));
        }
        self.plan.validate()
    }

    pub fn param_count(&self) -> usize {
        let (d, s) = (self.dim, self.segment());
        let qkv = 3 * d * d + 3 * d;
        let branches: usize = self
            .plan
            .pre_attention
            .iter()
            .map(|a| a.param_count(s) + 2 * s)
            .sum();
        let non_att = if self.plan.non_attention.is_identity() {
            0
        } else {
            let k = self.plan.non_attention.kernel;
            3 * s * k * k + 3 * s + 3 * s * s + s
        } + 2 * s;
        let ensemble = d * d + d + 2 * d;
        qkv + branches + non_att + ensemble
    }

    /// Multiply-adds for one sample with `n` tokens.
    pub fn macs(&self, n: usize) -> usize {
        let (d, s) = (self.dim, self.segment());
        let qkv = 3 * d * d * n;
        let branches: usize = self
            .plan
            .pre_attention
            .iter()
            .map(|a| 3 * a.macs_per_token(s) * n)
            .sum();
        let non_att = if self.plan.non_attention.is_identity() {
            0
        } else {
            let k = self.plan.non_attention.kernel;
            (3 * s * k * k + 3 * s * s) * n
        };
        let dh = self.head_dim();
        let attention = 2 * n * dh * dh * self.heads;
        qkv + branches + non_att + attention + d * d * n
    }
}

/// Split `B×D×H×W` channel-wise into five equal segments in branch order.
pub fn split_segments(tape: &mut Tape, qkv: Var, dim: usize) -> Result<Vec<Var>> {
    if !dim.is_multiple_of(SEGMENTS) {
        return Err(Error::config(format!(
            "dim {dim} is not divisible by {SEGMENTS}"
        )));
    }
    tape.split(qkv, 1, &[dim / SEGMENTS; SEGMENTS])
}

fn check_qkv(tape: &Tape, op: &'static str, q: Var, k: Var, v: Var) -> Result<()> {
    let s = tape.shape(q);
    if s.len() != 4 {
        return Err(Error::shape(op, s, &[0, 0, 0, 0]));
    }
    for other in [k, v] {
        if tape.shape(other) != s {
            return Err(Error::shape(op, s, tape.shape(other)));
        }
    }
    Ok(())
}

/// Linear-cost attention on `B×h×N×d` inputs:
/// `out = (q·scale) · (softmax_N(k)ᵀ · v)`. With `softmax_on_context` the
/// softmax is applied to the rows of the `d×d` product `kᵀv` instead.
pub fn factorized_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
    softmax_on_context: bool,
) -> Result<Var> {
    check_qkv(tape, "factorized_attention", q, k, v)?;
    let context = if softmax_on_context {
        let c = tape.bmm(k, v, true, false)?;
        tape.softmax(c, 3)?
    } else {
        let ks = tape.softmax(k, 2)?;
        tape.bmm(ks, v, true, false)?
    };
    let qs = tape.scale(q, scale);
    tape.bmm(qs, context, false, false)
}

/// Dense attention `softmax(q·kᵀ·scale)·v` on `B×h×N×d` inputs.
pub fn vanilla_attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    check_qkv(tape, "vanilla_attention", q, k, v)?;
    let qs = tape.scale(q, scale);
    let scores = tape.bmm(qs, k, false, true)?;
    let attn = tape.softmax(scores, 3)?;
    tape.bmm(attn, v, false, false)
}

#[derive(Clone, Debug)]
enum Aggregator {
    Identity,
    Conv { depthwise: Conv, pointwise: Conv },
    Pool { kind: PoolKind, k: usize },
}

impl Aggregator {
    fn new(
        store: &mut ParamStore,
        path: &str,
        spec: AggregatorSpec,
        channels: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(match spec.kind {
            AggregatorKind::Identity => Self::Identity,
            AggregatorKind::DepthwiseConv => Self::Conv {
                depthwise: Conv::new(
                    store,
                    &format!("{path}.dw"),
                    ConvKind::Depthwise,
                    channels,
                    channels,
                    spec.kernel,
                    1,
                    rng,
                )?,
                pointwise: Conv::new(
                    store,
                    &format!("{path}.pw"),
                    ConvKind::Pointwise,
                    channels,
                    channels,
                    1,
                    1,
                    rng,
                )?,
            },
            kind => Self::Pool {
                kind: kind.pool().expect("pool kinds"),
                k: spec.kernel,
            },
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Self::Identity => Ok(x),
            Self::Conv {
                depthwise,
                pointwise,
            } => {
                let y = depthwise.forward(tape, p, x)?;
                pointwise.forward(tape, p, y)
            }
            Self::Pool { kind, k } => tape.pool2d(x, *kind, *k),
        }
    }
}

/// One pre-attention segment: aggregator, channel norm, HardSwish.
#[derive(Clone, Debug)]
struct Branch {
    agg: Aggregator,
    norm: Norm,
}

impl Branch {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.agg.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y, 1)?;
        Ok(tape.hardswish(y))
    }
}

#[derive(Clone, Debug)]
pub struct GmaBlock {
    pub config: GmaConfig,
    qkv: Linear,
    branches: Vec<Branch>,
    non_att: Option<(Conv, Conv)>,
    non_att_norm: Norm,
    ensemble: Linear,
    ensemble_norm: Norm,
}

impl GmaBlock {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        config: GmaConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, s) = (config.dim, config.segment());
        let qkv = Linear::new(store, &format!("{path}.qkv"), d, 3 * d, rng)?;
        let mut branches = Vec::with_capacity(4);
        for (i, spec) in config.plan.pre_attention.iter().enumerate() {
            let bp = format!("{path}.branch{i}");
            branches.push(Branch {
                agg: Aggregator::new(store, &format!("{bp}.agg"), *spec, s, rng)?,
                norm: Norm::new(store, &format!("{bp}.norm"), s)?,
            });
        }
        let na = config.plan.non_attention;
        let non_att = if na.is_identity() {
            None
        } else {
            let np = format!("{path}.non_att");
            Some((
                Conv::new(
                    store,
                    &format!("{np}.dw"),
                    ConvKind::Depthwise,
                    3 * s,
                    3 * s,
                    na.kernel,
                    1,
                    rng,
                )?,
                Conv::new(
                    store,
                    &format!("{np}.pw"),
                    ConvKind::Pointwise,
                    3 * s,
                    s,
                    1,
                    1,
                    rng,
                )?,
            ))
        };
        let non_att_norm = Norm::new(store, &format!("{path}.non_att.norm"), s)?;
        let ensemble = Linear::new(store, &format!("{path}.ensemble"), d, d, rng)?;
        let ensemble_norm = Norm::new(store, &format!("{path}.ensemble_norm"), d)?;
        Ok(Self {
            config,
            qkv,
            branches,
            non_att,
            non_att_norm,
            ensemble,
            ensemble_norm,
        })
    }

    /// `x` is `B×N×D` with `N = h·w`; the output has the same shape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != h * w || shape[2] != cfg.dim {
            return Err(Error::shape(
                "gma_forward",
                &shape,
                &[shape[0], h * w, cfg.dim],
            ));
        }
        let (b, n, d, s) = (shape[0], h * w, cfg.dim, cfg.segment());

        // B×N×3D → 3B×D×H×W with the Q, K, V thirds stacked on the batch axis.
        let qkv = self.qkv.forward(tape, p, x)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, d])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1])?;
        let qkv = tape.reshape(qkv, &[3 * b, d, h, w])?;
        let segs = split_segments(tape, qkv, d)?;

        let mut pre = Vec::with_capacity(4);
        for (branch, &seg) in self.branches.iter().zip(&segs) {
            pre.push(branch.forward(tape, p, seg)?);
        }
        let x_att = self.attention(tape, &pre, b, h, w)?;

        let x_non = match &self.non_att {
            Some((dw, pw)) => {
                let t = tape.reshape(segs[4], &[3, b, s, h * w])?;
                let t = tape.permute(t, &[1, 0, 2, 3])?;
                let t = tape.reshape(t, &[b, 3 * s, h, w])?;
                let t = dw.forward(tape, p, t)?;
                pw.forward(tape, p, t)?
            }
            None => tape.narrow(segs[4], 0, 2 * b, b)?,
        };
        let x_non = self.non_att_norm.forward(tape, p, x_non, 1)?;
        let x_non = tape.hardswish(x_non);

        let y = tape.concat(&[x_att, x_non], 1)?;
        let y = tape.reshape(y, &[b, d, n])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        let y = self.ensemble.forward(tape, p, y)?;
        let y = self.ensemble_norm.forward(tape, p, y, 2)?;
        Ok(tape.hardswish(y))
    }

    /// Multi-head attention over the concatenated pre-attention proxies.
    fn attention(&self, tape: &mut Tape, pre: &[Var], b: usize, h: usize, w: usize) -> Result<Var> {
        let cfg = &self.config;
        let (c, heads, dh, n) = (cfg.attn_dim(), cfg.heads, cfg.head_dim(), h * w);
        let joined = tape.concat(pre, 1)?;
        let mut qkv = Vec::with_capacity(3);
        for i in 0..3 {
            let t = tape.narrow(joined, 0, i * b, b)?;
            let t = tape.reshape(t, &[b, heads, dh, n])?;
            qkv.push(tape.permute(t, &[0, 1, 3, 2])?);
        }
        let out = factorized_attention(
            tape,
            qkv[0],
            qkv[1],
            qkv[2],
            cfg.scale(),
            cfg.softmax_on_context,
        )?;
        let out = tape.permute(out, &[0, 1, 3, 2])?;
        tape.reshape(out, &[b, c, h, w])
    }
}
