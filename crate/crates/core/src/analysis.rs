//! Parameter and multiply-accumulate accounting, attention timing, and the
//! aggregator ablation grid.
//!
//! FLOPs are counted as multiply-accumulates (1 MAC = 1 FLOP). Norms,
//! activations and softmax are not counted.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbone::{check_resolution, Downsample, ModelConfig, Preset};
use crate::error::Result;
use crate::gma::{factorized_attention, vanilla_attention, AggregatorKind, AggregatorSpec};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "path,params,flops";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub path: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub params: usize,
    pub flops: u64,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    fn push(&mut self, path: impl Into<String>, params: usize, flops: u64) {
        self.params += params;
        self.flops += flops;
        self.rows.push(CostRow {
            path: path.into(),
            params,
            flops,
        });
    }

    /// Rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.path, r.params, r.flops);
        }
        let _ = writeln!(out, "total,{},{}", self.params, self.flops);
        out
    }
}

/// Module path a parameter belongs to: `stem`, `head`, `stages.i.embed`
/// or `stages.i.blocks.j`.
pub fn module_of(name: &str) -> &str {
    let parts: Vec<&str> = name.splitn(5, '.').collect();
    let keep = match parts.first() {
        Some(&"stages") if parts.get(2) == Some(&"blocks") => 4,
        Some(&"stages") => 3,
        _ => 1,
    };
    let len: usize = parts.iter().take(keep).map(|p| p.len()).sum::<usize>() + keep - 1;
    &name[..len.min(name.len())]
}

/// Exact scalar count of a built model, one row per module. FLOPs are zero.
pub fn count_params(store: &ParamStore) -> CostReport {
    let mut report = CostReport::default();
    for (name, p) in store.iter() {
        let module = module_of(name);
        let n = p.value.numel();
        match report.rows.last_mut() {
            Some(row) if row.path == module => {
                row.params += n;
                report.params += n;
            }
            _ => report.push(module, n, 0),
        }
    }
    report
}

fn conv_norm(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout + 2 * cout
}

/// Analytic parameters and MACs at `h×w` input for `batch` images, with the
/// same rows as [`count_params`].
pub fn estimate_flops(config: &ModelConfig, h: usize, w: usize, batch: usize) -> Result<CostReport> {
    config.validate()?;
    check_resolution(h, w)?;
    let b = batch as u64;
    let mut report = CostReport::default();
    let dims: Vec<usize> = config.stages.iter().map(|s| s.dim).collect();

    let (mut ch, mut cw) = (h, w);
    let mid = dims[0] / 2;
    let mut params = 0;
    let mut macs = 0u64;
    for (cin, cout, stride) in [
        (config.input_channels, mid, 2),
        (mid, dims[0], 2),
        (dims[0], dims[0], 1),
        (dims[0], dims[0], 1),
    ] {
        ch = ch.div_ceil(stride);
        cw = cw.div_ceil(stride);
        params += conv_norm(cin, cout, 3);
        macs += (cout * cin * 9 * ch * cw) as u64;
    }
    report.push("stem", params, macs * b);

    for (i, sc) in config.stages.iter().enumerate() {
        if i > 0 {
            let (cin, cout) = (dims[i - 1], sc.dim);
            ch /= 2;
            cw /= 2;
            let px = ch * cw;
            let (p, m) = match config.downsample {
                Downsample::Separable => (
                    cin * 9 + cin + cout * cin + cout + 2 * cout,
                    cin * 9 * px + cout * cin * px,
                ),
                Downsample::Full => (conv_norm(cin, cout, 3), cout * cin * 9 * px),
            };
            report.push(format!("stages.{i}.embed"), p, m as u64 * b);
        }
        let n = ch * cw;
        let gma = config.gma_config(i);
        let (d, hid) = (sc.dim, sc.hidden());
        let block_params = 4 * d + gma.param_count() + d * hid + hid + hid * d + d;
        let block_macs = gma.macs(n) + 2 * d * hid * n;
        for j in 0..sc.depth {
            report.push(
                format!("stages.{i}.blocks.{j}"),
                block_params,
                block_macs as u64 * b,
            );
        }
    }
    let (d, c) = (dims[3], config.num_classes);
    report.push("head", 2 * d + d * c + c, (d * c) as u64 * b);
    Ok(report)
}

/// Attention implementation timed by [`bench_attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKernel {
    Factorized,
    Vanilla,
}

impl AttentionKernel {
    pub fn name(self) -> &'static str {
        match self {
            Self::Factorized => "factorized",
            Self::Vanilla => "vanilla",
        }
    }

    /// Multiply-adds for `n` tokens of width `dim` split over `heads`.
    pub fn macs(self, n: usize, dim: usize, heads: usize) -> u64 {
        let dh = dim / heads;
        let per_head = match self {
            Self::Factorized => 2 * n * dh * dh,
            Self::Vanilla => 2 * n * n * dh,
        };
        (per_head * heads) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub kernel: AttentionKernel,
    /// Median over the timed repetitions.
    pub seconds: f64,
    pub macs: u64,
}

pub const BENCH_HEADER: &str = "n,kernel,seconds,macs";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.9},{}", r.n, r.kernel.name(), r.seconds, r.macs);
    }
    out
}

/// Median forward wall time of both attention kernels for each token count.
/// One untimed warm-up run precedes the `reps` timed runs.
pub fn bench_attention(n_list: &[usize], dim: usize, heads: usize, reps: usize) -> Vec<BenchRow> {
    let reps = reps.max(3);
    let dh = dim / heads;
    let mut rows = Vec::new();
    for &n in n_list {
        let mut rng = SeededRng::stream(0, "bench", n as u64);
        let mut draw = || Tensor::from_fn(&[1, heads, n, dh], |_| rng.uniform_range(-1.0, 1.0));
        let (q, k, v) = (draw(), draw(), draw());
        for kernel in [AttentionKernel::Factorized, AttentionKernel::Vanilla] {
            let run = || {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (
                    tape.constant(q.clone()),
                    tape.constant(k.clone()),
                    tape.constant(v.clone()),
                );
                let scale = 1.0 / (dh as f64).sqrt();
                let start = Instant::now();
                let out = match kernel {
                    AttentionKernel::Factorized => {
                        factorized_attention(&mut tape, qv, kv, vv, scale, false)
                    }
                    AttentionKernel::Vanilla => vanilla_attention(&mut tape, qv, kv, vv, scale),
                };
                let elapsed = start.elapsed().as_secs_f64();
                out.expect("well-formed attention inputs");
                (elapsed, tape.macs())
            };
            run();
            let mut times = Vec::with_capacity(reps);
            let mut macs = 0;
            for _ in 0..reps {
                let (t, m) = run();
                times.push(t);
                macs = m;
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                n,
                kernel,
                seconds: times[reps / 2],
                macs,
            });
        }
    }
    rows
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let num: f64 = points
        .iter()
        .map(|p| (p.0.ln() - mx) * (p.1.ln() - my))
        .sum();
    let den: f64 = points.iter().map(|p| (p.0.ln() - mx).powi(2)).sum();
    num / den
}

/// Kernel sizes of the three aggregating pre-attention branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelPlan {
    /// 3, 5, 7 in every stage.
    Default,
    /// 5, 7, 9 in every stage.
    Enlarged,
    /// The same kernel in all three branches, per stage.
    PerStage([usize; 4]),
    /// The same kernel in all three branches and every stage.
    Uniform(usize),
}

impl KernelPlan {
    pub const LARGE_TO_SMALL: Self = Self::PerStage([7, 5, 3, 3]);
    pub const SMALL_TO_LARGE: Self = Self::PerStage([3, 3, 5, 7]);

    fn kernels(self, stage: usize) -> [usize; 3] {
        match self {
            Self::Default => [3, 5, 7],
            Self::Enlarged => [5, 7, 9],
            Self::PerStage(k) => [k[stage]; 3],
            Self::Uniform(k) => [k; 3],
        }
    }
}

/// One structural row of the aggregator ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationVariant {
    pub base: Preset,
    /// Aggregator of the non-attention branch.
    pub non_attention: bool,
    /// Aggregators of the three aggregating pre-attention branches.
    pub pre_attention: [bool; 3],
    /// Implementation of the enabled pre-attention aggregators.
    pub kind: AggregatorKind,
    pub kernels: KernelPlan,
}

impl AblationVariant {
    pub fn full(base: Preset) -> Self {
        Self {
            base,
            non_attention: true,
            pre_attention: [true; 3],
            kind: AggregatorKind::DepthwiseConv,
            kernels: KernelPlan::Default,
        }
    }

    pub fn none(base: Preset) -> Self {
        Self {
            non_attention: false,
            pre_attention: [false; 3],
            ..Self::full(base)
        }
    }
}

/// Config with disabled aggregators replaced by identity mappings.
pub fn make_ablation_variant(v: &AblationVariant) -> Result<ModelConfig> {
    let mut config = ModelConfig::preset(v.base);
    for (stage, plan) in config.plans.iter_mut().enumerate() {
        let kernels = v.kernels.kernels(stage);
        plan.pre_attention[0] = AggregatorSpec::IDENTITY;
        for i in 0..3 {
            plan.pre_attention[i + 1] = if v.pre_attention[i] {
                AggregatorSpec::new(v.kind, kernels[i])
            } else {
                AggregatorSpec::IDENTITY
            };
        }
        plan.non_attention = if v.non_attention {
            AggregatorSpec::conv(3)
        } else {
            AggregatorSpec::IDENTITY
        };
    }
    config.validate()?;
    Ok(config)
}

/// Every structural ablation row on the given base preset, with a stable name.
pub fn ablation_grid(base: Preset) -> Vec<(String, AblationVariant)> {
    let full = AblationVariant::full(base);
    let toggles = |non: bool, pre: [bool; 3]| AblationVariant {
        non_attention: non,
        pre_attention: pre,
        ..full
    };
    let mut grid = vec![
        ("agg-none".to_string(), toggles(false, [false; 3])),
        ("agg-pre".to_string(), toggles(false, [true; 3])),
        ("agg-non".to_string(), toggles(true, [false; 3])),
        ("agg-non-3x3".to_string(), toggles(true, [true, false, false])),
        ("agg-non-5x5".to_string(), toggles(true, [false, true, false])),
        ("agg-non-7x7".to_string(), toggles(true, [false, false, true])),
        ("agg-all".to_string(), full),
    ];
    for k in [3, 5, 7] {
        grid.push((
            format!("uniform-{k}x{k}"),
            AblationVariant {
                kernels: KernelPlan::Uniform(k),
                ..full
            },
        ));
    }
    for kind in [
        AggregatorKind::MinPool,
        AggregatorKind::MaxPool,
        AggregatorKind::AvgPool,
        AggregatorKind::DepthwiseConv,
    ] {
        grid.push((format!("impl-{}", kind.name()), AblationVariant { kind, ..full }));
    }
    for (name, kernels) in [
        ("kernels-5-7-9", KernelPlan::Enlarged),
        ("kernels-large-to-small", KernelPlan::LARGE_TO_SMALL),
        ("kernels-small-to-large", KernelPlan::SMALL_TO_LARGE),
    ] {
        grid.push((name.to_string(), AblationVariant { kernels, ..full }));
    }
    grid
}
