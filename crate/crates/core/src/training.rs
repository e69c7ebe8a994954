//! Synthetic group-pattern task, AdamW, cosine schedule and the toy
//! training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::{build_model, Mode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::weights::{self, Dtype};

/// Two patch intensities match when they differ by less than this.
const MATCH_MARGIN: f64 = 0.25;

/// Pixels per stage-1 token.
pub const TOKEN_PIXELS: usize = 4;

/// Images with two constant square patches on a noise background; the label
/// is 1 iff both patches have the same intensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTask {
    /// Image side in pixels.
    pub side: usize,
    /// Patch side in stage-1 tokens.
    pub patch: usize,
    /// Patch intensities are `levels` evenly spaced values in
    /// `[-contrast, contrast]`.
    pub levels: usize,
    pub contrast: f64,
    /// Background pixels are uniform in `[-noise, noise]`.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub const NUM_CLASSES: usize = 2;

    pub fn new(seed: u64) -> Self {
        Self {
            side: 32,
            patch: 3,
            levels: 2,
            contrast: 0.5,
            noise: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config("the synthetic task needs at least two intensity levels"));
        }
        let k = self.patch_pixels();
        if k == 0 || self.side < 2 * k {
            return Err(Error::config(format!(
                "a {0}x{0} grid cannot hold two non-overlapping {1}x{1} patches",
                self.side, k
            )));
        }
        Ok(())
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * TOKEN_PIXELS
    }

    /// Sample `index` of the stream: pixels in `C×H×W` order and the label.
    fn sample(&self, index: u64, out: &mut [f64]) -> usize {
        let mut rng = SeededRng::stream(self.seed, "synthetic", index);
        for v in out.iter_mut() {
            *v = rng.uniform_range(-self.noise, self.noise);
        }
        let k = self.patch_pixels();
        let span = self.side - k + 1;
        // Redraw both corners until the squares are disjoint.
        let ((y1, x1), (y2, x2)) = loop {
            let a = (rng.below(span), rng.below(span));
            let b = (rng.below(span), rng.below(span));
            if a.0.abs_diff(b.0) >= k || a.1.abs_diff(b.1) >= k {
                break (a, b);
            }
        };
        let matched = rng.bernoulli(0.5);
        let n = self.levels;
        let l1 = rng.below(n);
        let l2 = if matched { l1 } else { (l1 + 1 + rng.below(n - 1)) % n };
        let level = |l: usize| self.contrast * (2.0 * l as f64 / (n - 1) as f64 - 1.0);
        let (a, b) = (level(l1), level(l2));
        let hw = self.side * self.side;
        for ((y0, x0), value) in [((y1, x1), a), ((y2, x2), b)] {
            for ch in 0..3 {
                for y in y0..y0 + k {
                    let row = ch * hw + y * self.side;
                    out[row + x0..row + x0 + k].fill(value);
                }
            }
        }
        usize::from((a - b).abs() < MATCH_MARGIN)
    }
}

/// Samples `start..start+n` of the task's stream as `n×3×H×W` and labels.
pub fn gen_batch(task: &SyntheticTask, start: u64, n: usize) -> Result<(Tensor, Vec<usize>)> {
    task.validate()?;
    let per = 3 * task.side * task.side;
    let mut data = vec![0.0; n * per];
    let labels = data
        .chunks_mut(per)
        .enumerate()
        .map(|(i, chunk)| task.sample(start + i as u64, chunk))
        .collect();
    let images = Tensor::new(&[n, 3, task.side, task.side], data)?;
    Ok((images, labels))
}

/// The first `n` samples of the task.
pub fn gen_synthetic(task: &SyntheticTask, n: usize) -> Result<(Tensor, Vec<usize>)> {
    gen_batch(task, 0, n)
}

/// Pixel-wise logistic regression trained by full-batch gradient descent on
/// `n_train` samples; returns accuracy on the next `n_test` samples.
pub fn logistic_baseline(task: &SyntheticTask, n_train: usize, n_test: usize, iters: usize) -> Result<f64> {
    let (x, y) = gen_batch(task, 0, n_train)?;
    let dim = x.numel() / n_train;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let lr = 0.1;
    for _ in 0..iters {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (row, &label) in x.data().chunks(dim).zip(&y) {
            let z: f64 = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - label as f64;
            gb += err;
            gw.iter_mut().zip(row).for_each(|(g, a)| *g += err * a);
        }
        let scale = lr / n_train as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= scale * g);
        b -= scale * gb;
    }
    let (xt, yt) = gen_batch(task, n_train as u64, n_test)?;
    let correct = xt
        .data()
        .chunks(dim)
        .zip(&yt)
        .filter(|(row, &label)| {
            let z: f64 = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            usize::from(z > 0.0) == label
        })
        .count();
    Ok(correct as f64 / n_test as f64)
}

/// Linear warm-up then cosine decay. Steps are 1-indexed: step 0 gives 0,
/// step 1 gives `base/warmup`, step `warmup` gives `base`, step `total`
/// gives `floor`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, floor: f64) -> f64 {
    if step <= warmup {
        return if warmup == 0 {
            base
        } else {
            base * step as f64 / warmup as f64
        };
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    let t = t.min(1.0);
    floor + (base - floor) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Apply one update using the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((name, _)) = store
            .iter()
            .find(|(_, p)| !p.grad.all_finite())
        {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                *w -= decay * *w;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub floor_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Write a metrics row every this many steps (and at the last step).
    pub log_every: usize,
    /// Held-out samples for the final accuracy.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            base_lr: 2e-3,
            floor_lr: 1e-5,
            warmup: 100,
            weight_decay: 0.05,
            clip_norm: 5.0,
            log_every: 10,
            eval_samples: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,accuracy";

impl Metric {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10e},{:.10},{:.6}",
            self.step, self.lr, self.loss, self.accuracy
        )
    }
}

/// Samples reserved for evaluation start here, far past any training batch.
const EVAL_OFFSET: u64 = 1 << 40;

/// Model, parameters and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
    pub task: SyntheticTask,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, task: SyntheticTask, config: TrainConfig) -> Result<Self> {
        task.validate()?;
        if model_config.num_classes != SyntheticTask::NUM_CLASSES {
            return Err(Error::config(format!(
                "the synthetic task has {} classes, the model {}",
                SyntheticTask::NUM_CLASSES,
                model_config.num_classes
            )));
        }
        let (store, model) = build_model(model_config, config.seed)?;
        let opt = AdamW::new(&store, config.weight_decay);
        Ok(Self {
            model,
            store,
            opt,
            task,
            config,
        })
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.opt.step as usize
    }

    /// Loss and accuracy of the current parameters on a batch, with gradients
    /// accumulated into the store in training mode.
    fn forward_batch(&mut self, images: Tensor, labels: &[usize], mode: Mode, step: u64) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let p = match mode {
            Mode::Train => self.store.bind(&mut tape),
            Mode::Eval => self.store.bind_frozen(&mut tape),
        };
        let x = tape.constant(images);
        let mut rng = SeededRng::stream(self.config.seed, "drop-path", step);
        let out = self.model.forward(&mut tape, &p, x, mode, &mut rng)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        let value = tape.value(loss).item();
        let accuracy = accuracy(tape.value(out.logits), labels);
        if mode == Mode::Train && value.is_finite() {
            tape.backward(loss)?;
            self.store.accumulate_grads(&tape, &p);
        }
        Ok((value, accuracy))
    }

    /// Run one optimisation step; the batch depends only on the step index.
    pub fn train_step(&mut self) -> Result<Metric> {
        let step = self.step() + 1;
        let c = self.config;
        let start = (step as u64 - 1) * c.batch as u64;
        let (images, labels) = gen_batch(&self.task, start, c.batch)?;
        self.store.zero_grads();
        let (loss, accuracy) = self.forward_batch(images, &labels, Mode::Train, step as u64)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        clip_grad_norm(&mut self.store, c.clip_norm);
        let lr = cosine_lr(step, c.steps, c.warmup, c.base_lr, c.floor_lr);
        self.opt.update(&mut self.store, lr)?;
        Ok(Metric {
            step,
            lr,
            loss,
            accuracy,
        })
    }

    /// Loss of the current parameters on the batch the next step would use.
    pub fn next_step_loss(&mut self) -> Result<f64> {
        let step = self.step() + 1;
        let start = (step as u64 - 1) * self.config.batch as u64;
        let (images, labels) = gen_batch(&self.task, start, self.config.batch)?;
        Ok(self.forward_batch(images, &labels, Mode::Eval, step as u64)?.0)
    }

    /// Train until `config.steps`, writing metrics rows to `sink`.
    pub fn run(&mut self, sink: &mut dyn Write) -> Result<Vec<Metric>> {
        self.run_until(self.config.steps, sink)
    }

    /// Train up to step `stop` (capped at the configured total) without
    /// changing the schedule.
    pub fn run_until(&mut self, stop: usize, sink: &mut dyn Write) -> Result<Vec<Metric>> {
        let mut history = Vec::new();
        while self.step() < stop.min(self.config.steps) {
            let m = self.train_step()?;
            if m.step % self.config.log_every.max(1) == 0 || m.step == self.config.steps {
                writeln!(sink, "{}", m.csv_row()).map_err(|e| Error::io("metrics", e))?;
            }
            history.push(m);
        }
        Ok(history)
    }

    /// Accuracy on held-out samples, in chunks of the training batch size.
    pub fn evaluate(&mut self, n: usize) -> Result<f64> {
        let chunk = self.config.batch.max(1);
        let mut correct = 0.0;
        let mut done = 0;
        while done < n {
            let m = chunk.min(n - done);
            let (images, labels) = gen_batch(&self.task, EVAL_OFFSET + done as u64, m)?;
            let (_, acc) = self.forward_batch(images, &labels, Mode::Eval, 0)?;
            correct += acc * m as f64;
            done += m;
        }
        Ok(correct / n as f64)
    }
}

/// Optimizer state saved next to a weight archive: `final.gmxw` pairs with
/// `final.state.gmxw`.
pub fn state_path(weights: &Path) -> PathBuf {
    weights.with_extension("state.gmxw")
}

impl Trainer {
    /// Write `f32` weights to `path` and the exact `f64` parameters, moments
    /// and step counter to the sidecar.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        weights::save_weights(&self.store, path)?;
        let step = Tensor::new(&[1], vec![self.opt.step as f64])?;
        let mut entries: Vec<(String, &Tensor)> = vec![("step".into(), &step)];
        for (i, (name, p)) in self.store.iter().enumerate() {
            entries.push((format!("param.{name}"), &p.value));
            entries.push((format!("first.{name}"), &self.opt.first[i]));
            entries.push((format!("second.{name}"), &self.opt.second[i]));
        }
        let bytes = weights::encode(entries.iter().map(|(n, t)| (n.as_str(), *t)), Dtype::F64);
        weights::write_atomic(&state_path(path), &bytes)
    }

    /// Restore from [`Trainer::save_checkpoint`] output. Without a sidecar the
    /// weights are loaded and the optimizer starts fresh at step 0.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let archived = weights::read_archive(path)?;
        let mut store = self.store.clone();
        weights::assign(&mut store, &archived)?;
        let sidecar = state_path(path);
        if !sidecar.exists() {
            self.store = store;
            self.opt = AdamW::new(&self.store, self.config.weight_decay);
            return Ok(());
        }
        let state = weights::read_archive(&sidecar)?;
        let find = |key: &str| {
            state
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint state lacks `{key}`")))
        };
        let step = find("step")?.data()[0] as u64;
        let mut params = Vec::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (name, p) in store.iter() {
            let exact = find(&format!("param.{name}"))?;
            let agrees = exact
                .data()
                .iter()
                .zip(p.value.data())
                .all(|(a, b)| *a as f32 as f64 == *b);
            if exact.shape() != p.value.shape() || !agrees {
                return Err(Error::Format(format!(
                    "checkpoint state does not belong to {} (tensor `{name}`)",
                    path.display()
                )));
            }
            params.push((name.to_string(), exact.clone()));
            for (prefix, out) in [("first", &mut first), ("second", &mut second)] {
                let t = find(&format!("{prefix}.{name}"))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::ParamShape {
                        name: format!("{prefix}.{name}"),
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                out.push(t.clone());
            }
        }
        weights::assign(&mut store, &params)?;
        self.store = store;
        self.opt.step = step;
        self.opt.first = first;
        self.opt.second = second;
        Ok(())
    }
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            best == Some(label)
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<Metric>,
    pub final_accuracy: f64,
    pub trainer: Trainer,
}

/// Build, train and evaluate a model on the synthetic task. Metrics rows
/// (with header) go to `sink`.
pub fn train_toy(
    model_config: &ModelConfig,
    task: SyntheticTask,
    config: TrainConfig,
    sink: &mut dyn Write,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model_config, task, config)?;
    writeln!(sink, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    let history = trainer.run(sink)?;
    let final_accuracy = trainer.evaluate(config.eval_samples)?;
    Ok(TrainReport {
        history,
        final_accuracy,
        trainer,
    })
}
