use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use stochinterp::datasets::{sample_dataset, ToyDataset};
use stochinterp::estimator::{load_checkpoint, save_checkpoint, train};
use stochinterp::experiment::{run_seeds, CaseSpec, DriftSpec, ExperimentConfig};
use stochinterp::metrics::{knn_kl, KnnConfig};
use stochinterp::sampler::{euler_maruyama, initial_batch, DriftField, EmOptions, GmmDrift};
use stochinterp::schedules::{asymmetric_grid, exp_decay_grid, uniform_grid, ScheduleKind};
use stochinterp::{run_experiment, SampleBatch};

#[derive(Parser)]
#[command(name = "stochinterp", version, about = "Stochastic-interpolant sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a time grid as `k,t_k,h_k` CSV.
    ScheduleDump(ScheduleDumpArgs),
    /// Draw samples from a toy dataset.
    Dataset(DatasetArgs),
    /// Train a drift estimator for one case of an experiment config.
    Train(TrainArgs),
    /// Run the sampler for one case of an experiment config.
    Sample(SampleArgs),
    /// k-NN KL estimate between two sample files.
    Evaluate(EvaluateArgs),
    /// Execute a full experiment sweep.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    Uniform,
    Exp,
    Asymmetric,
}

#[derive(clap::Args)]
struct ScheduleDumpArgs {
    #[arg(long, value_enum)]
    kind: GridKind,
    /// Step parameter of the exp-decay grid.
    #[arg(long)]
    h: Option<f64>,
    /// Lower-half parameter of the asymmetric grid.
    #[arg(long)]
    h_a: Option<f64>,
    /// Upper-half parameter of the asymmetric grid.
    #[arg(long)]
    h_b: Option<f64>,
    /// Step count; required for uniform, selects parameters for the others.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    t0: f64,
    #[arg(long, default_value_t = 0.999)]
    tn: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetName {
    Checkerboard,
    Spiral,
    BlocksTarget,
    BlocksA,
    BlocksB,
    GmmBenchmark,
}

#[derive(clap::Args)]
struct DatasetArgs {
    #[arg(long, value_enum)]
    name: DatasetName,
    /// Dimension of the benchmark mixture.
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Component count of the benchmark mixture.
    #[arg(long, default_value_t = 8)]
    components: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Case to train on; the first case when absent.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Checkpoint manifest path; parameters go next to it with a `.bin` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SampleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    case: Option<String>,
    /// Learned drift checkpoint; the analytic drift is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Schedule family; the first configured schedule when absent.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    p: PathBuf,
    #[arg(long)]
    q: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    n_steps: Option<Vec<usize>>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

/// Failure in user input rather than in the computation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ScheduleDump(a) => schedule_dump(a),
        Command::Dataset(a) => dataset(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| usage(e.to_string()))
}

fn pick_case<'a>(cfg: &'a ExperimentConfig, name: Option<&str>) -> Result<&'a CaseSpec> {
    match name {
        None => Ok(&cfg.cases[0]),
        Some(n) => cfg
            .cases
            .iter()
            .find(|c| c.name == n)
            .ok_or_else(|| usage(format!("no case named {n:?} in the config"))),
    }
}

fn schedule_dump(a: ScheduleDumpArgs) -> Result<()> {
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| usage(format!("--{flag} is required for this kind")));
    let grid = match (a.kind, a.n) {
        (GridKind::Uniform, Some(n)) => uniform_grid(a.t0, a.tn, n)?,
        (GridKind::Uniform, None) => return Err(usage("--n is required for a uniform grid")),
        (GridKind::Exp, Some(n)) if a.h.is_none() => ScheduleKind::ExpDecay.grid_with_steps(a.t0, a.tn, n)?,
        (GridKind::Exp, _) => exp_decay_grid(a.t0, a.tn, need(a.h, "h")?)?,
        (GridKind::Asymmetric, Some(n)) if a.h_a.is_none() && a.h_b.is_none() => {
            ScheduleKind::Asymmetric.grid_with_steps(a.t0, a.tn, n)?
        }
        (GridKind::Asymmetric, _) => asymmetric_grid(a.t0, a.tn, need(a.h_a, "h-a")?, need(a.h_b, "h-b")?)?,
    };
    match a.out {
        Some(path) => grid.save_csv(&path)?,
        None => grid.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn dataset(a: DatasetArgs) -> Result<()> {
    let ds = match a.name {
        DatasetName::Checkerboard => ToyDataset::Checkerboard,
        DatasetName::Spiral => ToyDataset::Spiral,
        DatasetName::BlocksTarget => ToyDataset::BlocksTarget,
        DatasetName::BlocksA => ToyDataset::BlocksA,
        DatasetName::BlocksB => ToyDataset::BlocksB,
        DatasetName::GmmBenchmark => ToyDataset::GmmBenchmark {
            d: a.d,
            components: a.components,
        },
    };
    let batch = sample_dataset(ds, a.n, a.seed)?;
    batch.save(&a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let case = pick_case(&cfg, a.case.as_deref())?;
    let config = cfg.interpolant.config(case.problem.dim())?;
    let coupling = case.problem.coupling()?;
    let drift = train(&coupling, &config, &cfg.train)?;
    save_checkpoint(&drift, &a.out)?;
    let last = drift.trace().last();
    let summary = serde_json::json!({
        "case": case.name,
        "checkpoint": a.out,
        "steps": cfg.train.steps,
        "final_loss": last.map(|e| e.total),
        "final_loss_b": last.map(|e| e.loss_b),
        "final_loss_s": last.map(|e| e.loss_s),
    });
    println!("{summary}");
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let case = pick_case(&cfg, a.case.as_deref())?;
    let config = cfg.interpolant.config(case.problem.dim())?;
    let coupling = case.problem.coupling()?;
    let checkpoint = a.checkpoint.clone().or_else(|| {
        cfg.drifts.iter().find_map(|d| match d {
            DriftSpec::Learned { checkpoint } => checkpoint.clone(),
            DriftSpec::Analytic => None,
        })
    });
    let drift: Box<dyn DriftField> = match checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(usage(format!("drift checkpoint {} does not exist", path.display())));
            }
            let learned = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
            Box::new(learned.with_epsilon(config.epsilon)?)
        }
        None => Box::new(GmmDrift::new(coupling.clone(), &config)?),
    };
    let n_steps = a.n_steps.or_else(|| cfg.n_steps.first().copied()).unwrap_or(160);
    let grid = match a.schedule.as_deref() {
        Some(s) => s
            .parse::<ScheduleKind>()
            .map_err(|e| usage(e.to_string()))?
            .grid_with_steps(config.t0, config.tn, n_steps)?,
        None => {
            let (_, _, grid) = cfg.schedules[0]
                .grids(config.t0, config.tn, &[n_steps])
                .into_iter()
                .next()
                .expect("one grid per spec");
            grid?
        }
    };
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let (init_seed, noise_seed, _) = run_seeds(seed);
    let n = a.n.unwrap_or(cfg.n_samples);
    let init = initial_batch(&config, &coupling, n, init_seed)?;
    let mut out = euler_maruyama(drift.as_ref(), &grid, config.epsilon, &init, noise_seed, EmOptions::default())?;
    out.batch.meta.seed = seed;
    out.batch.save(&a.out)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let p = SampleBatch::load(&a.p).with_context(|| format!("reading {}", a.p.display()))?;
    let q = SampleBatch::load(&a.q).with_context(|| format!("reading {}", a.q.display()))?;
    let cfg = KnnConfig {
        k: a.k,
        ..KnnConfig::default()
    };
    let est = knn_kl(&p, &q, &cfg)?;
    let report = serde_json::json!({
        "kl": est.kl,
        "floored": est.floored,
        "flagged": est.flagged(),
        "k": a.k,
        "n_p": p.len(),
        "n_q": q.len(),
    });
    println!("{report}");
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    if let Some(n) = a.n_steps {
        cfg.n_steps = n;
    }
    if let Some(n) = a.n_samples {
        cfg.n_samples = n;
    }
    if let Some(k) = a.k {
        cfg.knn.k = k;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let report = run_experiment(&cfg)?;
    let failed = report.rows.iter().filter(|r| r.failed()).count();
    let mut err = BufWriter::new(io::stderr().lock());
    writeln!(
        err,
        "{} rows ({failed} failed) written to {}",
        report.rows.len(),
        report.results_path().display()
    )?;
    err.flush()?;
    if report.all_failed() {
        bail!("every run failed; see the error column of {}", report.results_path().display());
    }
    Ok(())
}
