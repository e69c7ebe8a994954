//! Named gradient checks covering every differentiable op, the GMA block
//! and an end-to-end toy model.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{build_model, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::gma::{factorized_attention, vanilla_attention, GmaBlock, GmaConfig};
use crate::gradcheck::{grad_check, grad_check_at, GradCheckOptions, GradCheckReport};
use crate::ops::conv::PoolKind;
use crate::ops::reduce::LN_EPS;
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Tolerance for single-op checks.
pub const OP_RTOL: f64 = 1e-4;
/// Tolerance for composite checks (block, model).
pub const COMPOSITE_RTOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteSize {
    Tiny,
    Small,
}

impl FromStr for SuiteSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            other => Err(Error::config(format!(
                "unknown suite size {other} (expected tiny or small)"
            ))),
        }
    }
}

impl fmt::Display for SuiteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::Small => "small",
        })
    }
}

type CheckFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub rtol: f64,
    inputs: Vec<Tensor>,
    points: Option<Vec<(usize, usize)>>,
    f: CheckFn,
}

impl fmt::Debug for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Case")
            .field("name", &self.name)
            .field("rtol", &self.rtol)
            .finish_non_exhaustive()
    }
}

impl Case {
    /// Run the check, optionally sabotaging one backward rule.
    pub fn run(&self, fault: Option<OpKind>) -> Result<GradCheckReport> {
        // Composites contain narrow channel norms whose curvature makes the
        // plain central difference too coarse.
        self.run_with(GradCheckOptions {
            fault,
            adaptive: self.rtol == COMPOSITE_RTOL,
            ..GradCheckOptions::default().with_rtol(self.rtol)
        })
    }

    pub fn run_with(&self, opts: GradCheckOptions) -> Result<GradCheckReport> {
        match &self.points {
            Some(points) => grad_check_at(&self.f, &self.inputs, points, opts),
            None => grad_check(&self.f, &self.inputs, opts),
        }
    }
}

struct Builder {
    rng: SeededRng,
    cases: Vec<Case>,
}

impl Builder {
    fn rand(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.uniform_range(-1.0, 1.0))
    }

    fn rand_range(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.uniform_range(lo, hi))
    }

    /// Register `f`; non-scalar outputs are reduced by a fixed projection so
    /// that no gradient is trivially uniform.
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    {
        self.push(name, OP_RTOL, inputs, None, f);
    }

    fn push<F>(
        &mut self,
        name: &str,
        rtol: f64,
        inputs: Vec<Tensor>,
        points: Option<Vec<(usize, usize)>>,
        f: F,
    ) where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    {
        // The projection must not share an op kind with the case itself,
        // or a sabotaged rule would be negated twice.
        let via_matmul = name == "mul";
        let f: CheckFn = Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = f(t, v)?;
            if t.shape(y) == [1] {
                Ok(y)
            } else {
                project(t, y, via_matmul)
            }
        });
        self.cases.push(Case {
            name: name.to_string(),
            rtol,
            inputs,
            points,
            f,
        });
    }
}

/// `Σ y_i · w_i` with weights that depend only on the position.
fn project(t: &mut Tape, y: Var, via_matmul: bool) -> Result<Var> {
    let numel: usize = t.shape(y).iter().product();
    let weight = |i: usize| ((i as f64 * 0.7548776662).fract() - 0.5) * 2.0 + 0.1;
    if via_matmul {
        let w = t.constant(Tensor::from_fn(&[numel, 1], weight));
        let row = t.reshape(y, &[1, numel])?;
        let p = t.matmul(row, w)?;
        return t.reshape(p, &[1]);
    }
    let w = t.constant(Tensor::from_fn(t.shape(y), weight));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Build every case of the suite. Input data is drawn from `seed`.
pub fn cases(size: SuiteSize, seed: u64) -> Vec<Case> {
    let mut b = Builder {
        rng: SeededRng::stream(seed, "gradcheck", 0),
        cases: Vec::new(),
    };
    let (n, c, hw) = match size {
        SuiteSize::Tiny => (2, 2, 4),
        SuiteSize::Small => (2, 3, 6),
    };

    let (x, y) = (b.rand(&[n, c, 3]), b.rand(&[n, c, 3]));
    b.op("add", vec![x.clone(), y.clone()], |t, v| t.add(v[0], v[1]));
    b.op("sub", vec![x.clone(), y.clone()], |t, v| t.sub(v[0], v[1]));
    b.op("mul", vec![x.clone(), y], |t, v| t.mul(v[0], v[1]));
    b.op("scale", vec![x.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
    let bias = b.rand(&[c]);
    b.op("add_bias", vec![x.clone(), bias], |t, v| {
        t.add_bias(v[0], v[1], 1)
    });
    b.op("scale_batch", vec![x.clone()], |t, v| {
        t.scale_batch(v[0], vec![0.0, 2.5])
    });
    b.op("sum", vec![x.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    });
    b.op("mean", vec![x.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    });

    let (a, m) = (b.rand(&[3, 4]), b.rand(&[4, c]));
    b.op("matmul", vec![a, m], |t, v| t.matmul(v[0], v[1]));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [n, 2, 4, 3] } else { [n, 2, 3, 4] };
        let sb = if tb { [n, 2, 5, 4] } else { [n, 2, 4, 5] };
        let inputs = vec![b.rand(&sa), b.rand(&sb)];
        b.op(&format!("bmm_t{}{}", ta as u8, tb as u8), inputs, move |t, v| {
            t.bmm(v[0], v[1], ta, tb)
        });
    }
    let inputs = vec![b.rand(&[n, 3, 4]), b.rand(&[4, 5]), b.rand(&[5])];
    b.op("linear", inputs, |t, v| t.linear(v[0], v[1], v[2]));

    let s = b.rand_range(&[n, c, 4], -2.0, 2.0);
    for axis in 0..3 {
        b.op(&format!("softmax_axis{axis}"), vec![s.clone()], move |t, v| {
            t.softmax(v[0], axis)
        });
    }
    let img = b.rand(&[n, c + 1, hw, hw]);
    let (g, be) = (b.rand_range(&[c + 1], 0.5, 1.5), b.rand(&[c + 1]));
    b.op(
        "layer_norm_channels",
        vec![img.clone(), g, be],
        |t, v| t.layer_norm(v[0], 1, v[1], v[2], LN_EPS),
    );
    let tok = b.rand(&[n, 3, 5]);
    let (g, be) = (b.rand_range(&[5], 0.5, 1.5), b.rand(&[5]));
    b.op("layer_norm_tokens", vec![tok, g, be], |t, v| {
        t.layer_norm(v[0], 2, v[1], v[2], LN_EPS)
    });
    let wide = b.rand_range(&[n, c, 4], -4.0, 4.0);
    b.op("hardswish", vec![wide.clone()], |t, v| Ok(t.hardswish(v[0])));
    b.op("gelu", vec![wide], |t, v| Ok(t.gelu(v[0])));
    b.op("global_avg_pool", vec![img.clone()], |t, v| {
        t.global_avg_pool(v[0])
    });

    let cc = c + 1;
    for k in [3, 5] {
        for stride in [1, 2] {
            let inputs = vec![img.clone(), b.rand(&[cc, k, k]), b.rand(&[cc])];
            b.op(
                &format!("conv2d_depthwise_k{k}_s{stride}"),
                inputs,
                move |t, v| t.conv2d_depthwise_strided(v[0], v[1], v[2], stride),
            );
        }
    }
    let inputs = vec![img.clone(), b.rand(&[3, cc]), b.rand(&[3])];
    b.op("conv2d_pointwise", inputs, |t, v| {
        t.conv2d_pointwise(v[0], v[1], v[2])
    });
    for stride in [1, 2] {
        let inputs = vec![img.clone(), b.rand(&[3, cc, 3, 3]), b.rand(&[3])];
        b.op(&format!("conv2d_s{stride}"), inputs, move |t, v| {
            t.conv2d(v[0], v[1], v[2], stride)
        });
    }
    for (kind, name) in [
        (PoolKind::Min, "min"),
        (PoolKind::Max, "max"),
        (PoolKind::Avg, "avg"),
    ] {
        b.op(&format!("pool2d_{name}"), vec![img.clone()], move |t, v| {
            t.pool2d(v[0], kind, 3)
        });
    }

    b.op("reshape", vec![x.clone()], move |t, v| {
        let y = t.reshape(v[0], &[c, n * 3])?;
        let w = t.constant(Tensor::from_fn(&[n * 3, 2], |i| i as f64 - 2.5));
        t.matmul(y, w)
    });
    b.op("permute", vec![img.clone()], |t, v| {
        let y = t.permute(v[0], &[2, 0, 3, 1])?;
        let y = t.softmax(y, 3)?;
        Ok(y)
    });
    b.op("narrow", vec![img.clone()], |t, v| {
        let y = t.narrow(v[0], 1, 1, 2)?;
        let y = t.mul(y, y)?;
        Ok(y)
    });
    let extra = b.rand(&[n, 2, 3]);
    b.op("concat", vec![x.clone(), extra], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        t.softmax(y, 1)
    });
    b.op("split", vec![img.clone()], move |t, v| {
        let parts = t.split(v[0], 1, &[1, c])?;
        let a = t.mul(parts[0], parts[0])?;
        let bsum = t.sum(parts[1]);
        let asum = t.sum(a);
        t.mul(asum, bsum)
    });
    let logits = b.rand_range(&[n + 1, c + 2], -2.0, 2.0);
    let labels: Vec<usize> = (0..n + 1).map(|i| i % (c + 2)).collect();
    b.op("cross_entropy", vec![logits], move |t, v| {
        t.cross_entropy(v[0], &labels)
    });

    let heads = 2;
    let att = [n, heads, hw + 1, 3];
    let qkv = vec![b.rand(&att), b.rand(&att), b.rand(&att)];
    let scale = 1.0 / 3f64.sqrt();
    b.op("factorized_attention", qkv.clone(), move |t, v| {
        factorized_attention(t, v[0], v[1], v[2], scale, false)
    });
    b.op("factorized_attention_context_softmax", qkv.clone(), move |t, v| {
        factorized_attention(t, v[0], v[1], v[2], scale, true)
    });
    b.op("vanilla_attention", qkv, move |t, v| {
        vanilla_attention(t, v[0], v[1], v[2], scale)
    });

    gma_case(&mut b, size);
    model_case(&mut b, size);
    b.cases
}

/// Inputs are the block's parameters followed by the token tensor.
fn gma_case(b: &mut Builder, size: SuiteSize) {
    let (dim, side) = match size {
        SuiteSize::Tiny => (20, 4),
        SuiteSize::Small => (20, 5),
    };
    let config = GmaConfig::new(dim, 2);
    let mut store = ParamStore::new();
    let mut rng = SeededRng::stream(7, "init", 0);
    let block = GmaBlock::new(&mut store, "gma", config, &mut rng).expect("valid block");
    perturb_params(&mut store, &mut b.rng);
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    inputs.push(b.rand(&[2, side * side, dim]));
    let np = store.len();
    b.push("gma_block", COMPOSITE_RTOL, inputs, None, move |t, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        block.forward(t, &p, v[np], side, side)
    });
}

/// End-to-end toy classifier with a cross-entropy loss. Only a sample of
/// elements per tensor is checked.
fn model_case(b: &mut Builder, size: SuiteSize) {
    let (dim, per_tensor) = match size {
        SuiteSize::Tiny => (20, 2),
        SuiteSize::Small => (20, 4),
    };
    let config = ModelConfig::toy(dim, 2, 2);
    let (mut store, model) = build_model(&config, 11).expect("valid toy model");
    perturb_params(&mut store, &mut b.rng);
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    inputs.push(b.rand(&[2, 3, 64, 64]));
    let mut points = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..per_tensor.min(t.numel()) {
            points.push((i, b.rng.below(t.numel())));
        }
    }
    points.sort_unstable();
    points.dedup();
    let np = store.len();
    b.push("toy_model", COMPOSITE_RTOL, inputs, Some(points), move |t, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let mut rng = SeededRng::new(0);
        let out = model.forward(t, &p, v[np], Mode::Eval, &mut rng)?;
        t.cross_entropy(out.logits, &[0, 1])
    });
}

/// Move parameters away from their symmetric initial values (unit norm
/// scales, zero biases) so every path carries a gradient.
fn perturb_params(store: &mut ParamStore, rng: &mut SeededRng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.uniform_range(-0.1, 0.1);
        }
    }
}
