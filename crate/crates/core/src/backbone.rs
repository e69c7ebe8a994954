//! Four-stage hierarchical backbone built from group-mix attention blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gma::{BranchPlan, GmaBlock, GmaConfig, SEGMENTS};
use crate::nn::{Conv, ConvKind, ConvNormAct, Linear, Norm};
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Total downsampling from image to stage-4 tokens.
pub const MAX_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub dim: usize,
    pub ratio: f64,
    pub depth: usize,
    pub heads: usize,
}

impl StageConfig {
    pub fn hidden(&self) -> usize {
        (self.ratio * self.dim as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    M,
    T,
    S,
    B,
    L,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::M, Preset::T, Preset::S, Preset::B, Preset::L];

    pub fn name(self) -> &'static str {
        match self {
            Preset::M => "M",
            Preset::T => "T",
            Preset::S => "S",
            Preset::B => "B",
            Preset::L => "L",
        }
    }

    fn table(self) -> ([usize; 4], [f64; 4], [usize; 4], f64) {
        match self {
            Preset::M => ([40, 80, 160, 160], [4.0; 4], [3, 3, 12, 4], 0.0),
            Preset::T => ([80, 160, 200, 240], [4.0; 4], [4, 4, 12, 4], 0.1),
            Preset::S => ([80, 160, 320, 320], [4.0; 4], [2, 4, 12, 4], 0.2),
            Preset::B => (
                [200, 240, 320, 480],
                [2.0, 2.0, 4.0, 4.0],
                [8, 8, 12, 8],
                0.4,
            ),
            Preset::L => (
                [240, 320, 360, 480],
                [4.0, 4.0, 2.0, 2.0],
                [8, 10, 30, 10],
                0.5,
            ),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown preset {s:?}, expected one of M, T, S, B, L"
                ))
            })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How stages 2–4 halve the resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Downsample {
    /// Depthwise 3×3 stride 2, then pointwise `D_i → D_{i+1}`.
    #[default]
    Separable,
    /// Dense 3×3 stride 2.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
    Hardswish,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: [StageConfig; 4],
    pub plans: [BranchPlan; 4],
    pub num_classes: usize,
    pub drop_path_rate: f64,
    pub input_channels: usize,
    pub softmax_on_context: bool,
    pub downsample: Downsample,
    pub ffn_activation: Activation,
}

pub const DEFAULT_HEADS: usize = 8;

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (dims, ratios, depths, dpr) = preset.table();
        let stages = std::array::from_fn(|i| StageConfig {
            dim: dims[i],
            ratio: ratios[i],
            depth: depths[i],
            heads: DEFAULT_HEADS,
        });
        Self::from_stages(stages, 1000, dpr)
    }

    pub fn from_stages(stages: [StageConfig; 4], num_classes: usize, drop_path_rate: f64) -> Self {
        Self {
            stages,
            plans: [BranchPlan::default(); 4],
            num_classes,
            drop_path_rate,
            input_channels: 3,
            softmax_on_context: false,
            downsample: Downsample::default(),
            ffn_activation: Activation::default(),
        }
    }

    /// Uniform small model: every stage has width `dim`, one block, ratio 4.
    pub fn toy(dim: usize, heads: usize, num_classes: usize) -> Self {
        let stage = StageConfig {
            dim,
            ratio: 4.0,
            depth: 1,
            heads,
        };
        Self::from_stages([stage; 4], num_classes, 0.0)
    }

    pub fn with_plan(mut self, plan: BranchPlan) -> Self {
        self.plans = [plan; 4];
        self
    }

    pub fn gma_config(&self, stage: usize) -> GmaConfig {
        let s = &self.stages[stage];
        GmaConfig {
            dim: s.dim,
            heads: s.heads,
            plan: self.plans[stage],
            softmax_on_context: self.softmax_on_context,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    /// Stochastic-depth rate of every block, ramping linearly from 0.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        let n = self.total_blocks();
        (0..n)
            .map(|i| {
                if n <= 1 {
                    0.0
                } else {
                    self.drop_path_rate * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            let stage = i + 1;
            if s.dim == 0 || s.dim % SEGMENTS != 0 {
                return Err(Error::config(format!(
                    "stage {stage}: dim {} is not divisible by {SEGMENTS}",
                    s.dim
                )));
            }
            let attn = 4 * s.dim / SEGMENTS;
            if s.heads == 0 || !attn.is_multiple_of(s.heads) {
                return Err(Error::config(format!(
                    "stage {stage}: attention width {attn} is not divisible by {} heads",
                    s.heads
                )));
            }
            if s.depth == 0 {
                return Err(Error::config(format!(
                    "stage {stage}: depth must be positive"
                )));
            }
            if !(s.ratio > 0.0 && s.ratio.is_finite()) || s.hidden() == 0 {
                return Err(Error::config(format!(
                    "stage {stage}: invalid ffn ratio {}",
                    s.ratio
                )));
            }
            self.plans[i]
                .validate()
                .map_err(|e| Error::config(format!("stage {stage}: {e}")))?;
        }
        if self.stages[0].dim < 2 {
            return Err(Error::config("stage 1: dim must be at least 2"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        Ok(())
    }
}

pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(MAX_STRIDE) || !w.is_multiple_of(MAX_STRIDE) {
        return Err(Error::config(format!(
            "input {h}x{w} is not a positive multiple of {MAX_STRIDE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `x + residual`, with the residual dropped per sample at rate `rate` in
/// training mode and survivors rescaled by `1/(1-rate)`.
pub fn drop_path(
    tape: &mut Tape,
    x: Var,
    residual: Var,
    rate: f64,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!(
            "drop path rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return tape.add(x, residual);
    }
    let keep = 1.0 - rate;
    let batch = tape.shape(residual)[0];
    let factors = (0..batch)
        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let r = tape.scale_batch(residual, factors)?;
    tape.add(x, r)
}

/// Stem: two stride-2 and two stride-1 3×3 convolutions, each followed by
/// norm and activation.
#[derive(Clone, Debug)]
pub struct Stem {
    layers: Vec<ConvNormAct>,
}

impl Stem {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        cin: usize,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mid = dim / 2;
        let plan = [(cin, mid, 2), (mid, dim, 2), (dim, dim, 1), (dim, dim, 1)];
        let mut layers = Vec::with_capacity(4);
        for (i, (ci, co, stride)) in plan.into_iter().enumerate() {
            let lp = format!("{path}.{i}");
            layers.push(ConvNormAct {
                conv: Conv::new(
                    store,
                    &format!("{lp}.conv"),
                    ConvKind::Dense,
                    ci,
                    co,
                    3,
                    stride,
                    rng,
                )?,
                norm: Norm::new(store, &format!("{lp}.norm"), co)?,
            });
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, img: Var) -> Result<Var> {
        let s = tape.shape(img);
        if s.len() != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
            return Err(Error::config(format!(
                "stem input {s:?} is not B×C×H×W with H, W divisible by 4"
            )));
        }
        let mut x = img;
        for layer in &self.layers {
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }
}

/// 2× downsampling between stages, followed by a channel norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    convs: Vec<Conv>,
    norm: Norm,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        kind: Downsample,
        cin: usize,
        cout: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let convs = match kind {
            Downsample::Separable => vec![
                Conv::new(
                    store,
                    &format!("{path}.dw"),
                    ConvKind::Depthwise,
                    cin,
                    cin,
                    3,
                    2,
                    rng,
                )?,
                Conv::new(
                    store,
                    &format!("{path}.pw"),
                    ConvKind::Pointwise,
                    cin,
                    cout,
                    1,
                    1,
                    rng,
                )?,
            ],
            Downsample::Full => vec![Conv::new(
                store,
                &format!("{path}.conv"),
                ConvKind::Dense,
                cin,
                cout,
                3,
                2,
                rng,
            )?],
        };
        Ok(Self {
            convs,
            norm: Norm::new(store, &format!("{path}.norm"), cout)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::config(format!(
                "patch embedding input {s:?} has odd spatial size"
            )));
        }
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(tape, p, y)?;
        }
        self.norm.forward(tape, p, y, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{path}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{path}.fc2"), hidden, dim, rng)?,
            act,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.fc1.forward(tape, p, x)?;
        let y = match self.act {
            Activation::Gelu => tape.gelu(y),
            Activation::Hardswish => tape.hardswish(y),
        };
        self.fc2.forward(tape, p, y)
    }
}

/// Pre-norm residual block: attention then feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    norm1: Norm,
    gma: GmaBlock,
    norm2: Norm,
    ffn: Ffn,
    pub drop_rate: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        gma: GmaConfig,
        hidden: usize,
        act: Activation,
        drop_rate: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d = gma.dim;
        Ok(Self {
            norm1: Norm::new(store, &format!("{path}.norm1"), d)?,
            gma: GmaBlock::new(store, &format!("{path}.gma"), gma, rng)?,
            norm2: Norm::new(store, &format!("{path}.norm2"), d)?,
            ffn: Ffn::new(store, &format!("{path}.ffn"), d, hidden, act, rng)?,
            drop_rate,
        })
    }

    /// `x` is `B×N×D` with `N = h·w`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        h: usize,
        w: usize,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let y = self.norm1.forward(tape, p, x, 2)?;
        let y = self.gma.forward(tape, p, y, h, w)?;
        let x = drop_path(tape, x, y, self.drop_rate, mode, rng)?;
        let y = self.norm2.forward(tape, p, x, 2)?;
        let y = self.ffn.forward(tape, p, y)?;
        drop_path(tape, x, y, self.drop_rate, mode, rng)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Option<PatchEmbed>,
    blocks: Vec<EncoderBlock>,
}

/// Logits and the four stage outputs (`B×D_i×H/2^{i+2}×W/2^{i+2}`).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub features: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    stem: Stem,
    stages: Vec<Stage>,
    head_norm: Norm,
    head: Linear,
}

/// Construct a model and its freshly initialised parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(ParamStore, Model)> {
    config.validate()?;
    let mut rng = SeededRng::stream(seed, "init", 0);
    let mut store = ParamStore::new();
    let dims: Vec<usize> = config.stages.iter().map(|s| s.dim).collect();
    let stem = Stem::new(&mut store, "stem", config.input_channels, dims[0], &mut rng)?;
    let rates = config.drop_path_rates();
    let mut next_rate = rates.iter().copied();
    let mut stages = Vec::with_capacity(4);
    for (i, sc) in config.stages.iter().enumerate() {
        let sp = format!("stages.{i}");
        let embed = if i == 0 {
            None
        } else {
            Some(PatchEmbed::new(
                &mut store,
                &format!("{sp}.embed"),
                config.downsample,
                dims[i - 1],
                sc.dim,
                &mut rng,
            )?)
        };
        let mut blocks = Vec::with_capacity(sc.depth);
        for j in 0..sc.depth {
            blocks.push(EncoderBlock::new(
                &mut store,
                &format!("{sp}.blocks.{j}"),
                config.gma_config(i),
                sc.hidden(),
                config.ffn_activation,
                next_rate.next().expect("one rate per block"),
                &mut rng,
            )?);
        }
        stages.push(Stage { embed, blocks });
    }
    let head_norm = Norm::new(&mut store, "head.norm", dims[3])?;
    let head = Linear::new(&mut store, "head.fc", dims[3], config.num_classes, &mut rng)?;
    let model = Model {
        config: config.clone(),
        stem,
        stages,
        head_norm,
        head,
    };
    Ok((store, model))
}

impl Model {
    /// Full forward pass on a `B×C×H×W` image batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        img: Var,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<ForwardOutput> {
        let s = tape.shape(img).to_vec();
        if s.len() != 4 || s[1] != self.config.input_channels {
            return Err(Error::shape(
                "model_forward",
                &s,
                &[s[0], self.config.input_channels, 0, 0],
            ));
        }
        check_resolution(s[2], s[3])?;
        let b = s[0];
        let mut x = self.stem.forward(tape, p, img)?;
        let mut features = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(embed) = &stage.embed {
                x = embed.forward(tape, p, x)?;
            }
            let xs = tape.shape(x).to_vec();
            let (d, h, w) = (xs[1], xs[2], xs[3]);
            let t = tape.reshape(x, &[b, d, h * w])?;
            let mut t = tape.permute(t, &[0, 2, 1])?;
            for block in &stage.blocks {
                t = block.forward(tape, p, t, h, w, mode, rng)?;
            }
            let t = tape.permute(t, &[0, 2, 1])?;
            x = tape.reshape(t, &[b, d, h, w])?;
            features.push(x);
        }
        let y = self.head_norm.forward(tape, p, x, 1)?;
        let y = tape.global_avg_pool(y)?;
        let logits = self.head.forward(tape, p, y)?;
        Ok(ForwardOutput {
            logits,
            features: features.try_into().expect("four stages"),
        })
    }

    /// Eval-mode forward without gradient tracking; returns logits and the
    /// four pyramid features.
    pub fn predict(&self, store: &ParamStore, img: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(img.clone());
        let mut rng = SeededRng::new(0);
        let out = self.forward(&mut tape, &p, x, Mode::Eval, &mut rng)?;
        let feats = out
            .features
            .iter()
            .map(|&f| tape.value(f).clone())
            .collect();
        Ok((tape.value(out.logits).clone(), feats))
    }
}
