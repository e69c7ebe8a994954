//! `gmx`: describe, cost, gradient-check, train, benchmark and ablate
//! group-mix attention backbones.
//!
//! Reports go to stdout as CSV or `key=value` lines; prose goes to stderr.
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration or usage
//! error, 3 I/O error, 4 numeric divergence.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use groupmix::analysis::{
    ablation_grid, bench_attention, bench_csv, estimate_flops, log_log_slope, make_ablation_variant,
    AttentionKernel,
};
use groupmix::config::{env_seed, ConfigFile};
use groupmix::suite::{cases, SuiteSize};
use groupmix::training::{SyntheticTask, TrainConfig, Trainer, METRICS_HEADER};
use groupmix::weights::write_atomic;
use groupmix::{BranchPlan, Error, ModelConfig, OpKind, Preset};

#[derive(Parser)]
#[command(name = "gmx", version, about = "Group-mix attention backbones on a small autodiff engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-stage widths, depths, heads, token grids and branch plans.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Input resolution used for the token grid sizes.
        #[arg(long, default_value_t = 224)]
        res: usize,
    },
    /// Parameter and FLOP breakdown as CSV.
    Cost {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Finite-difference gradient checks of every op and composite.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        scale: SuiteSize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the backward rule of this op (negative control).
        #[arg(long, value_name = "OP", value_parser = parse_op)]
        inject_fault: Option<OpKind>,
    },
    /// Train on the synthetic two-patch task.
    Train(TrainArgs),
    /// Time factorized against vanilla attention over token counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,2048,4096")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write one config file per row of the ablation grid.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "T")]
        base: Preset,
        #[arg(long, default_value_t = 224)]
        res: usize,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, conflicts_with = "config")]
    preset: Option<Preset>,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    /// The model and the config-file seed, or `None` when neither flag is set.
    fn resolve(&self) -> Result<Option<(ModelConfig, u64)>, Error> {
        if let Some(p) = self.preset {
            return Ok(Some((ModelConfig::preset(p), 0)));
        }
        match &self.config {
            Some(path) => {
                let file = ConfigFile::load(path)?;
                Ok(Some((file.model_config()?, file.effective_seed()?)))
            }
            None => Ok(None),
        }
    }

    fn require(&self) -> Result<(ModelConfig, u64), Error> {
        self.resolve()?
            .ok_or_else(|| Error::Config("one of --preset or --config is required".into()))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory for `metrics.csv` and `final.gmxw`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Defaults to `GMX_SEED`, then the config file seed, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    #[arg(long, default_value_t = 1024)]
    eval_samples: usize,
    /// Stop after this step; the schedule still spans `--steps`.
    #[arg(long)]
    stop_at: Option<usize>,
    /// Continue from a weight archive written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Replace every aggregator with the identity.
    #[arg(long)]
    all_identity: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    side: Option<usize>,
    /// Patch side in 4-pixel tokens.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    contrast: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op {s:?}, expected one of {}", names.join(", "))
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ParamShape { .. } => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gmx: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Describe { model, res } => describe(&model, res),
        Command::Cost { model, res, batch } => {
            let (config, _) = model.require()?;
            print!("{}", estimate_flops(&config, res, res, batch)?.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            scale,
            seed,
            inject_fault,
        } => gradcheck(scale, seed, inject_fault),
        Command::Train(args) => train(&args),
        Command::Bench { n, dim, heads, reps } => {
            if reps < 3 || n.len() < 2 || heads == 0 || dim % heads != 0 {
                return Err(Error::Config(
                    "bench needs --reps >= 3, two or more --n values and heads dividing dim".into(),
                ));
            }
            let rows = bench_attention(&n, dim, heads, reps);
            print!("{}", bench_csv(&rows));
            for kernel in [AttentionKernel::Factorized, AttentionKernel::Vanilla] {
                let points: Vec<_> = rows
                    .iter()
                    .filter(|r| r.kernel == kernel)
                    .map(|r| (r.n as f64, r.seconds))
                    .collect();
                eprintln!("{} time slope {:.3}", kernel.name(), log_log_slope(&points));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { out, base, res } => ablate(&out, base, res),
    }
}

fn describe(model: &ModelArgs, res: usize) -> Result<ExitCode, Error> {
    let (config, _) = model.require()?;
    config.validate()?;
    let report = estimate_flops(&config, res, res, 1)?;
    let mut out = String::new();
    for (i, s) in config.stages.iter().enumerate() {
        let side = res >> (i + 2);
        let plan = &config.plans[i];
        let pre: Vec<String> = plan.pre_attention.iter().map(|a| a.to_string()).collect();
        writeln!(
            out,
            "stage={} dim={} ratio={} depth={} heads={} tokens={side}x{side} pre_attention={} non_attention={}",
            i + 1,
            s.dim,
            s.ratio,
            s.depth,
            s.heads,
            pre.join(","),
            plan.non_attention
        )
        .expect("string write");
    }
    writeln!(out, "num_classes={}", config.num_classes).expect("string write");
    writeln!(out, "params={}", report.params).expect("string write");
    writeln!(out, "flops={}", report.flops).expect("string write");
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(scale: SuiteSize, seed: u64, fault: Option<OpKind>) -> Result<ExitCode, Error> {
    if let Some(op) = fault {
        eprintln!("injecting a negated backward rule into {op}");
    }
    println!("case,rtol,checked,max_rel_err,worst_input,worst_index,status");
    let mut failures = Vec::new();
    let all = cases(scale, seed);
    for case in &all {
        let r = case.run(fault)?;
        let (input, index) = r.worst.unwrap_or((0, 0));
        let status = if r.passed { "pass" } else { "fail" };
        println!(
            "{},{:e},{},{:.3e},{input},{index},{status}",
            case.name, case.rtol, r.checked, r.max_rel_err
        );
        if !r.passed {
            failures.push((case.name.clone(), input, index, r.max_rel_err));
        }
    }
    if failures.is_empty() {
        eprintln!("all {} gradient checks passed", all.len());
        return Ok(ExitCode::SUCCESS);
    }
    failures.sort_by(|a, b| b.3.total_cmp(&a.3));
    let names: Vec<_> = failures.iter().map(|f| f.0.as_str()).collect();
    let (name, input, index, err) = &failures[0];
    eprintln!(
        "{} of {} gradient checks failed: {}; worst {name} at input {input} element {index}, rel-err {err:.3e}",
        failures.len(),
        all.len(),
        names.join(", ")
    );
    Ok(ExitCode::from(1))
}

fn train(args: &TrainArgs) -> Result<ExitCode, Error> {
    let (mut model, file_seed) = args
        .model
        .resolve()?
        .unwrap_or((ModelConfig::toy(20, 2, 2), env_seed()?.unwrap_or(0)));
    if args.all_identity {
        model = model.with_plan(BranchPlan::all_identity());
    }
    let seed = args.seed.unwrap_or(file_seed);
    let mut task = SyntheticTask::new(seed);
    let t = &args.task;
    task.side = t.side.unwrap_or(task.side);
    task.patch = t.patch.unwrap_or(task.patch);
    task.noise = t.noise.unwrap_or(task.noise);
    task.contrast = t.contrast.unwrap_or(task.contrast);
    task.levels = t.levels.unwrap_or(task.levels);
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        steps: args.steps,
        batch: args.batch,
        base_lr: args.lr.unwrap_or(defaults.base_lr),
        log_every: args.log_every,
        eval_samples: args.eval_samples,
        seed,
        ..defaults
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let metrics_path = args.out.join("metrics.csv");
    let weights_path = args.out.join("final.gmxw");
    // Fail on an unwritable directory before any training.
    write_atomic(&args.out.join(".gmx-write-probe"), b"")?;
    let _ = std::fs::remove_file(args.out.join(".gmx-write-probe"));

    let mut trainer = Trainer::new(&model, task, config)?;
    let mut metrics = Vec::new();
    if let Some(path) = &args.resume {
        trainer.resume(path)?;
        if let Ok(existing) = std::fs::read(&metrics_path) {
            metrics = existing;
        }
        eprintln!("resumed from {} at step {}", path.display(), trainer.step());
    }
    if metrics.is_empty() {
        writeln!(metrics, "{METRICS_HEADER}").expect("vec write");
    }
    let outcome = trainer.run_until(args.stop_at.unwrap_or(args.steps), &mut metrics);
    write_atomic(&metrics_path, &metrics)?;
    let history = outcome?;
    trainer.save_checkpoint(&weights_path)?;
    let accuracy = trainer.evaluate(config.eval_samples)?;
    if let Some(last) = history.last() {
        println!("final_step={}", last.step);
        println!("final_loss={}", last.loss);
    }
    println!("eval_accuracy={accuracy}");
    println!("metrics={}", metrics_path.display());
    println!("weights={}", weights_path.display());
    Ok(ExitCode::SUCCESS)
}

fn ablate(out: &Path, base: Preset, res: usize) -> Result<ExitCode, Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    println!("name,file,params,flops");
    for (name, variant) in ablation_grid(base) {
        let config = make_ablation_variant(&variant)?;
        let report = estimate_flops(&config, res, res, 1)?;
        let path = out.join(format!("{name}.json"));
        write_atomic(&path, ConfigFile::from_model(&config, 0).to_json().as_bytes())?;
        println!("{name},{},{},{}", path.display(), report.params, report.flops);
    }
    Ok(ExitCode::SUCCESS)
}
