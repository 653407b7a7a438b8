//! Declarative sweeps over cases, grids, step counts and seeds, reported as a
//! CSV of KL estimates plus a JSON manifest.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::SampleBatch;
use crate::datasets::{gmm_benchmark, paired_coupling, ToyDataset};
use crate::error::{Error, Result};
use crate::estimator::{load_checkpoint, save_checkpoint, train, LearnedDrift, TrainConfig};
use crate::gmm::{GaussianMixture, TimeMarginal};
use crate::interpolant::{sample_interpolant, Coupling, GammaFamily, InterpolantConfig};
use crate::metrics::{knn_kl, KlEstimate, KnnConfig};
use crate::rng::{derive_seed, domain};
use crate::sampler::{euler_maruyama, initial_batch, DriftField, EmOptions, GmmDrift};
use crate::schedules::{asymmetric_grid, exp_decay_grid, uniform_grid, ScheduleKind, TimeGrid};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "STOCHINTERP_OUT";
/// Output directory used when neither the config nor the environment names one.
pub const DEFAULT_OUTPUT_DIR: &str = "stochinterp-out";
/// File name of the results table inside the output directory.
pub const RESULTS_FILE: &str = "results.csv";
/// File name of the manifest inside the output directory.
pub const MANIFEST_FILE: &str = "manifest.json";

const RUN_INIT: u64 = 0;
const RUN_NOISE: u64 = 1;
const RUN_REFERENCE: u64 = 2;

/// Study performed by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ScheduleComparison,
    DistanceEffect,
    DimensionScaling,
    TrainAndSample,
    MarginalEvolution,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ScheduleComparison => "schedule-comparison",
            ExperimentKind::DistanceEffect => "distance-effect",
            ExperimentKind::DimensionScaling => "dimension-scaling",
            ExperimentKind::TrainAndSample => "train-and-sample",
            ExperimentKind::MarginalEvolution => "marginal-evolution",
        }
    }
}

/// Interpolant settings shared by every case; the dimension comes from the case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessSpec {
    pub gamma: GammaFamily,
    pub epsilon: f64,
    pub t0: f64,
    pub tn: f64,
}

impl Default for ProcessSpec {
    fn default() -> Self {
        Self {
            gamma: GammaFamily::BridgeScale { a: 2.0 },
            epsilon: 1.0,
            t0: 0.001,
            tn: 0.999,
        }
    }
}

impl ProcessSpec {
    pub fn config(&self, dim: usize) -> Result<InterpolantConfig> {
        InterpolantConfig::new(self.gamma, self.epsilon, self.t0, self.tn, dim)
    }
}

/// Endpoint laws and their coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Two explicit mixtures, independent unless `matched` pairs components.
    Mixtures {
        rho0: GaussianMixture,
        rho1: GaussianMixture,
        #[serde(default)]
        matched: bool,
    },
    /// Standard normal to the ring benchmark mixture.
    Benchmark {
        d: usize,
        #[serde(default = "default_components")]
        components: usize,
    },
    /// Block-paired draws from two toy datasets.
    Datasets {
        source: ToyDataset,
        target: ToyDataset,
        #[serde(default = "default_pairs")]
        pairs: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_components() -> usize {
    8
}

fn default_pairs() -> usize {
    100_000
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        match self {
            ProblemSpec::Mixtures { rho0, .. } => rho0.dim(),
            ProblemSpec::Benchmark { d, .. } => *d,
            ProblemSpec::Datasets { source, .. } => source.dim(),
        }
    }

    pub fn coupling(&self) -> Result<Coupling> {
        match self {
            ProblemSpec::Mixtures { rho0, rho1, matched } => {
                if *matched {
                    Coupling::matched(rho0.clone(), rho1.clone())
                } else {
                    Coupling::independent(rho0.clone(), rho1.clone())
                }
            }
            ProblemSpec::Benchmark { d, components } => {
                Coupling::independent(GaussianMixture::standard_normal(*d)?, gmm_benchmark(*d, *components)?)
            }
            ProblemSpec::Datasets {
                source,
                target,
                pairs,
                seed,
            } => paired_coupling(*source, *target, *pairs, *seed),
        }
    }
}

/// Named problem in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub name: String,
    pub problem: ProblemSpec,
}

/// Grid with explicit parameters; its step count follows from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FixedGrid {
    Uniform { n: usize },
    ExpDecay { h: f64 },
    Asymmetric { h_a: f64, h_b: f64 },
}

/// A family swept over the configured step counts, or a single fixed grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Family(ScheduleKind),
    Fixed(FixedGrid),
}

impl GridSpec {
    /// Grids generated on `(t0, tn)`, one per entry of `n_steps` for families.
    pub fn grids(&self, t0: f64, tn: f64, n_steps: &[usize]) -> Vec<(String, usize, Result<TimeGrid>)> {
        match *self {
            GridSpec::Family(kind) => n_steps
                .iter()
                .map(|&n| (kind.name().to_string(), n, kind.grid_with_steps(t0, tn, n)))
                .collect(),
            GridSpec::Fixed(fixed) => {
                let (label, grid) = match fixed {
                    FixedGrid::Uniform { n } => (format!("uniform(n={n})"), uniform_grid(t0, tn, n)),
                    FixedGrid::ExpDecay { h } => (format!("exp_decay(h={h})"), exp_decay_grid(t0, tn, h)),
                    FixedGrid::Asymmetric { h_a, h_b } => {
                        (format!("asymmetric(h_a={h_a},h_b={h_b})"), asymmetric_grid(t0, tn, h_a, h_b))
                    }
                };
                let n = grid.as_ref().map(TimeGrid::n_steps).unwrap_or(0);
                vec![(label, n, grid)]
            }
        }
    }
}

/// Source of the drift used by the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    /// Closed-form drift; Gaussian-mixture problems only.
    Analytic,
    /// Trained estimator, loaded from `checkpoint` or trained per case.
    Learned {
        #[serde(default)]
        checkpoint: Option<PathBuf>,
    },
}

impl DriftSpec {
    fn label(&self) -> &'static str {
        match self {
            DriftSpec::Analytic => "analytic",
            DriftSpec::Learned { .. } => "learned",
        }
    }
}

/// One experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub interpolant: ProcessSpec,
    pub cases: Vec<CaseSpec>,
    #[serde(default = "default_schedules")]
    pub schedules: Vec<GridSpec>,
    #[serde(default = "default_n_steps")]
    pub n_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Size of the exact reference sample; defaults to `n_samples`.
    #[serde(default)]
    pub reference_samples: Option<usize>,
    #[serde(default)]
    pub knn: KnnConfig,
    /// Drift sources to compare; empty selects the kind's default.
    #[serde(default)]
    pub drifts: Vec<DriftSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Checkpoint budget for marginal-evolution runs.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_schedules() -> Vec<GridSpec> {
    vec![
        GridSpec::Family(ScheduleKind::ExpDecay),
        GridSpec::Family(ScheduleKind::Uniform),
    ]
}

fn default_n_steps() -> Vec<usize> {
    vec![10, 40, 160, 640]
}

fn default_n_samples() -> usize {
    50_000
}

fn default_checkpoints() -> usize {
    16
}

impl ExperimentConfig {
    /// Parses a JSON document; errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.interpolant.config(1)?;
        if self.cases.is_empty() {
            return Err(Error::Config("`cases` must list at least one case".into()));
        }
        let mut seen = HashMap::new();
        for (i, case) in self.cases.iter().enumerate() {
            let ok = !case.name.is_empty()
                && case
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
            if !ok {
                return Err(Error::Config(format!(
                    "cases[{i}].name {:?} must be non-empty ASCII letters, digits, '-', '_' or '.'",
                    case.name
                )));
            }
            if seen.insert(case.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("cases[{i}].name {:?} is repeated", case.name)));
            }
        }
        if self.schedules.is_empty() {
            return Err(Error::Config("`schedules` must list at least one grid".into()));
        }
        let sweeps_families = self.schedules.iter().any(|g| matches!(g, GridSpec::Family(_)));
        if sweeps_families && (self.n_steps.is_empty() || self.n_steps.contains(&0)) {
            return Err(Error::Config("`n_steps` must list positive step counts".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.knn.k == 0 {
            return Err(Error::Config("`knn.k` must be positive".into()));
        }
        let min_samples = self.knn.k + 1;
        if self.n_samples < min_samples || self.reference_samples.is_some_and(|m| m < min_samples) {
            return Err(Error::Config(format!(
                "`n_samples` and `reference_samples` must be at least {min_samples}"
            )));
        }
        if self.experiment == ExperimentKind::MarginalEvolution && self.checkpoints == 0 {
            return Err(Error::Config("`checkpoints` must be positive".into()));
        }
        for (i, d) in self.drifts.iter().enumerate() {
            if let DriftSpec::Learned { checkpoint: Some(p) } = d {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "drifts[{i}].checkpoint: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if self.resolved_drifts().iter().any(|d| matches!(d, DriftSpec::Learned { checkpoint: None })) {
            self.train.validate()?;
        }
        Ok(())
    }

    /// Drift sources after applying the kind's default.
    pub fn resolved_drifts(&self) -> Vec<DriftSpec> {
        if !self.drifts.is_empty() {
            return self.drifts.clone();
        }
        match self.experiment {
            ExperimentKind::TrainAndSample => vec![DriftSpec::Learned { checkpoint: None }],
            _ => vec![DriftSpec::Analytic],
        }
    }

    /// Output directory: the config's, else `$STOCHINTERP_OUT`, else a fixed default.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    /// Hex SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One CSV row. Failed runs carry an `error` and no estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub case: String,
    pub dim: usize,
    pub schedule: String,
    pub n_steps: usize,
    pub seed: u64,
    pub drift: String,
    pub t: f64,
    pub kl: Option<f64>,
    pub floored: Option<usize>,
    pub flagged: Option<bool>,
    pub error: String,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

/// Seeds and timing of one sampler run, kept in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case: String,
    pub schedule: String,
    pub n_steps: usize,
    pub seed: u64,
    pub drift: String,
    pub init_seed: u64,
    pub noise_seed: u64,
    pub reference_seed: u64,
    pub wall_seconds: f64,
    pub ok: bool,
}

/// Training performed for a case with a learned drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub case: String,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub library_version: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub results: String,
    pub runs: Vec<RunRecord>,
    pub training: Vec<TrainingRecord>,
    pub trajectory_files: Vec<PathBuf>,
}

/// In-memory result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

impl ExperimentReport {
    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join(RESULTS_FILE)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }

    /// True when no run produced an estimate.
    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(ResultRow::failed)
    }

    /// Rows matching a case, schedule label and step count.
    pub fn select<'a>(&'a self, case: &'a str, schedule: &'a str, n_steps: usize) -> impl Iterator<Item = &'a ResultRow> {
        self.rows
            .iter()
            .filter(move |r| r.case == case && r.schedule == schedule && r.n_steps == n_steps)
    }
}

/// Exact draws of `ρ(t)`: the mixture marginal for Gaussian couplings, the
/// interpolant law for paired data.
pub fn reference_batch(config: &InterpolantConfig, coupling: &Coupling, t: f64, n: usize, seed: u64) -> Result<SampleBatch> {
    match coupling {
        Coupling::PairedEmpirical { .. } => sample_interpolant(config, coupling, t, n, seed),
        _ => TimeMarginal::for_coupling(coupling, config.gamma, t)?.sample(n, seed),
    }
}

/// Seeds of a run's initial batch, sampler noise and exact reference.
pub fn run_seeds(seed: u64) -> (u64, u64, u64) {
    (
        derive_seed(seed, &[domain::EXPERIMENT, RUN_INIT]),
        derive_seed(seed, &[domain::EXPERIMENT, RUN_NOISE]),
        derive_seed(seed, &[domain::EXPERIMENT, RUN_REFERENCE]),
    )
}

fn error_text(e: &Error) -> String {
    format!("{}: {e}", e.tag())
}

struct Case {
    spec: CaseSpec,
    config: Result<InterpolantConfig>,
    coupling: Result<Coupling>,
}

struct RunSpec<'a> {
    case: &'a Case,
    schedule: &'a str,
    n_steps: usize,
    grid: &'a Result<TimeGrid>,
    seed: u64,
    drift_label: &'a str,
    drift: std::result::Result<&'a dyn DriftField, &'a str>,
}

struct Sweep<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    rows: Vec<ResultRow>,
    runs: Vec<RunRecord>,
    trajectory_files: Vec<PathBuf>,
}

impl Sweep<'_> {
    fn run(&mut self, spec: RunSpec<'_>) {
        let (init_seed, noise_seed, reference_seed) = run_seeds(spec.seed);
        let started = Instant::now();
        let base = ResultRow {
            experiment: self.cfg.experiment.name().to_string(),
            case: spec.case.spec.name.clone(),
            dim: spec.case.spec.problem.dim(),
            schedule: spec.schedule.to_string(),
            n_steps: spec.n_steps,
            seed: spec.seed,
            drift: spec.drift_label.to_string(),
            t: self.cfg.interpolant.tn,
            kl: None,
            floored: None,
            flagged: None,
            error: String::new(),
        };
        let rows = match self.sample_and_score(&spec, init_seed, noise_seed, reference_seed) {
            Ok(scored) => scored
                .into_iter()
                .map(|(t, est)| ResultRow {
                    t,
                    kl: Some(est.kl),
                    floored: Some(est.floored),
                    flagged: Some(est.flagged()),
                    ..base.clone()
                })
                .collect(),
            Err(e) => vec![ResultRow {
                error: e,
                ..base.clone()
            }],
        };
        let ok = rows.iter().all(|r| !r.failed());
        self.rows.extend(rows);
        self.runs.push(RunRecord {
            case: base.case,
            schedule: base.schedule,
            n_steps: base.n_steps,
            seed: base.seed,
            drift: base.drift,
            init_seed,
            noise_seed,
            reference_seed,
            wall_seconds: started.elapsed().as_secs_f64(),
            ok,
        });
    }

    fn sample_and_score(
        &mut self,
        spec: &RunSpec<'_>,
        init_seed: u64,
        noise_seed: u64,
        reference_seed: u64,
    ) -> std::result::Result<Vec<(f64, KlEstimate)>, String> {
        let config = spec.case.config.as_ref().map_err(error_text)?;
        let coupling = spec.case.coupling.as_ref().map_err(error_text)?;
        let grid = spec.grid.as_ref().map_err(error_text)?;
        let drift = spec.drift.map_err(str::to_string)?;
        let evolution = self.cfg.experiment == ExperimentKind::MarginalEvolution;
        let options = EmOptions {
            record_trajectory: evolution,
            max_checkpoints: self.cfg.checkpoints,
        };
        let m = self.cfg.reference_samples.unwrap_or(self.cfg.n_samples);
        let score = |batch: &SampleBatch| -> Result<(f64, KlEstimate)> {
            let t = batch.meta.t;
            let reference = reference_batch(config, coupling, t, m, reference_seed)?;
            Ok((t, knn_kl(&reference, batch, &self.cfg.knn)?))
        };
        let run = || -> Result<(Vec<(f64, KlEstimate)>, Vec<PathBuf>)> {
            let init = initial_batch(config, coupling, self.cfg.n_samples, init_seed)?;
            let output = euler_maruyama(drift, grid, config.epsilon, &init, noise_seed, options)?;
            if !evolution {
                return Ok((vec![score(&output.batch)?], Vec::new()));
            }
            let dir = self.out.join("trajectories").join(format!(
                "{}__{}__{}__n{}__seed{}",
                spec.case.spec.name,
                spec.drift_label,
                sanitize(spec.schedule),
                spec.n_steps,
                spec.seed
            ));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut scored = Vec::with_capacity(output.trajectory.len());
            for (j, batch) in output.trajectory.iter().enumerate() {
                let path = dir.join(format!("checkpoint_{j:03}.csv"));
                batch.save(&path)?;
                scored.push((score(batch)?, path));
            }
            Ok(scored.into_iter().unzip())
        };
        let (scores, paths) = run().map_err(|e| error_text(&e))?;
        self.trajectory_files.extend(paths);
        Ok(scores)
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

enum Drift {
    Analytic(GmmDrift),
    Learned(LearnedDrift),
}

impl Drift {
    fn as_field(&self) -> &dyn DriftField {
        match self {
            Drift::Analytic(d) => d,
            Drift::Learned(d) => d,
        }
    }
}

fn learned_for_case(
    cfg: &ExperimentConfig,
    case: &Case,
    checkpoint: Option<&Path>,
    out: &Path,
    training: &mut Vec<TrainingRecord>,
) -> Result<LearnedDrift> {
    let config = case.config.as_ref().map_err(clone_error)?;
    let drift = match checkpoint {
        Some(path) => {
            let drift = load_checkpoint(path)?;
            let stored = drift.interpolant();
            if stored.gamma != config.gamma || stored.dim != config.dim {
                return Err(Error::Config(format!(
                    "{}: trained for {} in dimension {}, case {} needs {} in dimension {}",
                    path.display(),
                    stored.gamma.label(),
                    stored.dim,
                    case.spec.name,
                    config.gamma.label(),
                    config.dim
                )));
            }
            drift
        }
        None => {
            let coupling = case.coupling.as_ref().map_err(clone_error)?;
            let started = Instant::now();
            let trained = train(coupling, config, &cfg.train);
            let mut record = TrainingRecord {
                case: case.spec.name.clone(),
                seed: cfg.train.seed,
                checkpoint: None,
                wall_seconds: 0.0,
                error: None,
            };
            let trained = trained.and_then(|d| {
                let dir = out.join("checkpoints");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join(format!("{}.json", case.spec.name));
                save_checkpoint(&d, &path)?;
                record.checkpoint = Some(path);
                Ok(d)
            });
            record.wall_seconds = started.elapsed().as_secs_f64();
            record.error = trained.as_ref().err().map(error_text);
            training.push(record);
            trained?
        }
    };
    drift.with_epsilon(config.epsilon)
}

/// Errors are not `Clone`; cached per-case failures are re-raised by message.
fn clone_error(e: &Error) -> Error {
    Error::Config(format!("{e}"))
}

/// Runs the sweep and writes `results.csv` and `manifest.json` under the
/// resolved output directory.
///
/// Sub-run failures become rows with an `error` tag; only failures to write
/// the reports are returned as errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cases: Vec<Case> = cfg
        .cases
        .iter()
        .map(|spec| Case {
            spec: spec.clone(),
            config: cfg.interpolant.config(spec.problem.dim()),
            coupling: spec.problem.coupling(),
        })
        .collect();
    let drifts = cfg.resolved_drifts();
    let mut sweep = Sweep {
        cfg,
        out: &out,
        rows: Vec::new(),
        runs: Vec::new(),
        trajectory_files: Vec::new(),
    };
    let mut training = Vec::new();
    for case in &cases {
        let grids: Vec<_> = cfg
            .schedules
            .iter()
            .flat_map(|g| g.grids(cfg.interpolant.t0, cfg.interpolant.tn, &cfg.n_steps))
            .collect();
        for spec in &drifts {
            let drift = match (spec, case.config.as_ref(), case.coupling.as_ref()) {
                (DriftSpec::Analytic, Ok(config), Ok(coupling)) => {
                    GmmDrift::new(coupling.clone(), config).map(Drift::Analytic)
                }
                (DriftSpec::Learned { checkpoint }, _, _) => {
                    learned_for_case(cfg, case, checkpoint.as_deref(), &out, &mut training).map(Drift::Learned)
                }
                (_, Err(e), _) | (_, _, Err(e)) => Err(clone_error(e)),
            };
            let drift_error = drift.as_ref().err().map(error_text);
            for (label, n_steps, grid) in &grids {
                for &seed in &cfg.seeds {
                    sweep.run(RunSpec {
                        case,
                        schedule: label,
                        n_steps: *n_steps,
                        grid,
                        seed,
                        drift_label: spec.label(),
                        drift: match &drift {
                            Ok(d) => Ok(d.as_field()),
                            Err(_) => Err(drift_error.as_deref().unwrap_or_default()),
                        },
                    });
                }
            }
        }
    }

    let results = out.join(RESULTS_FILE);
    write_rows(&results, &sweep.rows)?;
    let out_prefix = |p: PathBuf| p.strip_prefix(&out).map(Path::to_path_buf).unwrap_or(p);
    let manifest = Manifest {
        experiment: cfg.experiment.name().to_string(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.hash(),
        config: cfg.clone(),
        results: RESULTS_FILE.to_string(),
        runs: sweep.runs,
        training: training
            .into_iter()
            .map(|r| TrainingRecord {
                checkpoint: r.checkpoint.map(out_prefix),
                ..r
            })
            .collect(),
        trajectory_files: sweep.trajectory_files.into_iter().map(out_prefix).collect(),
    };
    let manifest_path = out.join(MANIFEST_FILE);
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(ExperimentReport {
        rows: sweep.rows,
        manifest,
        output_dir: out,
    })
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a results table written by [`run_experiment`].
pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(kind: ExperimentKind, out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            experiment: kind,
            interpolant: ProcessSpec::default(),
            cases: vec![CaseSpec {
                name: "ring".into(),
                problem: ProblemSpec::Benchmark { d: 2, components: 4 },
            }],
            schedules: default_schedules(),
            n_steps: vec![10, 20],
            seeds: vec![0, 1],
            n_samples: 500,
            reference_samples: None,
            knn: KnnConfig::default(),
            drifts: Vec::new(),
            train: TrainConfig::default(),
            checkpoints: 5,
            output_dir: Some(out.to_path_buf()),
        }
    }

    #[test]
    fn sweep_writes_one_row_per_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(ExperimentKind::ScheduleComparison, dir.path());
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 2);
        assert!(report.rows.iter().all(|r| !r.failed() && r.kl.is_some()));
        let back = read_rows(report.results_path()).unwrap();
        assert_eq!(back, report.rows);
        let manifest: Manifest =
            serde_json::from_reader(File::open(report.manifest_path()).unwrap()).unwrap();
        assert_eq!(manifest.runs.len(), 8);
        assert_eq!(manifest.config_sha256, cfg.hash());
        assert_eq!(manifest.config_sha256.len(), 64);
    }

    #[test]
    fn rerun_gives_identical_csv() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&small_config(ExperimentKind::ScheduleComparison, a.path())).unwrap();
        run_experiment(&small_config(ExperimentKind::ScheduleComparison, b.path())).unwrap();
        let read = |d: &Path| fs::read(d.join(RESULTS_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn evolution_writes_checkpoint_budget() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(ExperimentKind::MarginalEvolution, dir.path());
        cfg.schedules = vec![GridSpec::Family(ScheduleKind::ExpDecay)];
        cfg.n_steps = vec![20];
        cfg.seeds = vec![3];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.manifest.trajectory_files.len(), 5);
        let run_dir = dir.path().join("trajectories").join("ring__analytic__exp_decay__n20__seed3");
        let csvs = fs::read_dir(run_dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
            .count();
        assert_eq!(csvs, 5);
        let ts: Vec<f64> = report.rows.iter().map(|r| r.t).collect();
        assert_eq!(ts.first(), Some(&0.001));
        assert_eq!(ts.last(), Some(&0.999));
    }

    #[test]
    fn failures_become_tagged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(ExperimentKind::ScheduleComparison, dir.path());
        cfg.cases = vec![CaseSpec {
            name: "blocks".into(),
            problem: ProblemSpec::Datasets {
                source: ToyDataset::BlocksA,
                target: ToyDataset::BlocksTarget,
                pairs: 100,
                seed: 0,
            },
        }];
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_failed());
        assert!(report.rows.iter().all(|r| r.error.starts_with("config:")));
    }

    #[test]
    fn fixed_grid_reports_its_step_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(ExperimentKind::ScheduleComparison, dir.path());
        cfg.schedules = vec![GridSpec::Fixed(FixedGrid::ExpDecay { h: 0.5 })];
        cfg.seeds = vec![0];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].schedule, "exp_decay(h=0.5)");
        let expected = exp_decay_grid(0.001, 0.999, 0.5).unwrap().n_steps();
        assert_eq!(report.rows[0].n_steps, expected);
    }

    #[test]
    fn parse_errors_name_the_key_path() {
        let text = r#"{"experiment": "schedule-comparison", "seeds": [0],
            "cases": [{"name": "a", "problem": {"type": "benchmark", "d": "two"}}]}"#;
        let msg = ExperimentConfig::from_json(text).unwrap_err().to_string();
        assert!(msg.contains("cases[0].problem"), "{msg}");
        let text = r#"{"experiment": "schedule-comparison", "seeds": [0], "cases": [], "bogus": 1}"#;
        let msg = ExperimentConfig::from_json(text).unwrap_err().to_string();
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn validation_rejects_bad_sweeps() {
        let dir = tempfile::tempdir().unwrap();
        let base = small_config(ExperimentKind::ScheduleComparison, dir.path());
        let mut c = base.clone();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.cases.push(c.cases[0].clone());
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.cases[0].name = "../x".into();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.drifts = vec![DriftSpec::Learned {
            checkpoint: Some(dir.path().join("missing.json")),
        }];
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("missing.json"), "{msg}");
        assert!(base.validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(ExperimentKind::DistanceEffect, dir.path());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }
}
