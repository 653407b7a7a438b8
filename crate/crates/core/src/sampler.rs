//! Euler–Maruyama integration of the forward SDE on a time grid.
//!
//! `X_{k+1} = X_k + h_k b̂_F(t_k, X_k) + √(2ε h_k) w_k`, with the drift frozen at
//! the left end of each step. Noise for sample `i` at step `k` comes from its
//! own stream, so output does not depend on the thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::batch::{BatchMeta, SampleBatch};
use crate::error::{check_dim, Error, Result};
use crate::gmm::{GaussianMixture, MarginalScratch, TimeMarginal};
use crate::interpolant::{sample_interpolant, Coupling, GammaFamily, InterpolantConfig};
use crate::rng::{domain, StreamKey};
use crate::schedules::TimeGrid;

/// Coordinates beyond this magnitude abort the run.
pub const BLOWUP_THRESHOLD: f64 = 1e9;

/// Evaluable drift `(t, x) ↦ b̂_F(t, x)` over batches.
pub trait DriftField: Send + Sync {
    /// Provenance label recorded in batch metadata.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    /// Evaluates every row of the row-major batch `xs` into `out`.
    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Drift given by a per-point closure.
pub struct FnDrift<F> {
    id: String,
    dim: usize,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(id: impl Into<String>, dim: usize, f: F) -> Self {
        Self { id: id.into(), dim, f }
    }
}

impl<F> DriftField for FnDrift<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        out.par_chunks_mut(self.dim)
            .zip(xs.par_chunks(self.dim))
            .for_each(|(o, x)| (self.f)(t, x, o));
        Ok(())
    }
}

/// Exact drift for a Gaussian-mixture coupling.
#[derive(Debug, Clone)]
pub struct GmmDrift {
    coupling: Coupling,
    gamma: GammaFamily,
    epsilon: f64,
}

impl GmmDrift {
    pub fn new(coupling: Coupling, config: &InterpolantConfig) -> Result<Self> {
        config.validate()?;
        if matches!(coupling, Coupling::PairedEmpirical { .. }) {
            return Err(Error::Config(
                "analytic drift needs a Gaussian-mixture coupling; train an estimator instead".into(),
            ));
        }
        coupling.validate()?;
        check_dim(config.dim, coupling.dim())?;
        Ok(Self {
            coupling,
            gamma: config.gamma,
            epsilon: config.epsilon,
        })
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn marginal(&self, t: f64) -> Result<TimeMarginal> {
        TimeMarginal::for_coupling(&self.coupling, self.gamma, t)
    }
}

impl DriftField for GmmDrift {
    fn id(&self) -> String {
        format!("gmm-analytic[{}, eps={}]", self.gamma.label(), self.epsilon)
    }

    fn dim(&self) -> usize {
        self.coupling.dim()
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        let tm = self.marginal(t)?;
        let d = self.dim();
        out.par_chunks_mut(d).zip(xs.par_chunks(d)).for_each_init(
            || (MarginalScratch::new(&tm), vec![0.0; d]),
            |(scratch, score), (o, x)| tm.drift_into(self.epsilon, x, scratch, score, o),
        );
        Ok(())
    }
}

/// Options for [`euler_maruyama`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmOptions {
    pub record_trajectory: bool,
    /// Upper bound on stored checkpoints, spread evenly over the grid indices.
    pub max_checkpoints: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            record_trajectory: false,
            max_checkpoints: 16,
        }
    }
}

/// Sampler output: the batch at `t_N` and, optionally, checkpoints.
#[derive(Debug, Clone)]
pub struct EmOutput {
    pub batch: SampleBatch,
    pub trajectory: Vec<SampleBatch>,
}

/// Grid indices kept when recording at most `budget` checkpoints of `n_steps`.
pub fn checkpoint_indices(n_steps: usize, budget: usize) -> Vec<usize> {
    let count = budget.min(n_steps + 1);
    match count {
        0 => Vec::new(),
        1 => vec![n_steps],
        c => (0..c)
            .map(|j| ((j * n_steps) as f64 / (c - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Integrates `init` from `grid.t0()` to `grid.tn()`.
pub fn euler_maruyama(
    drift: &dyn DriftField,
    grid: &TimeGrid,
    epsilon: f64,
    init: &SampleBatch,
    seed: u64,
    options: EmOptions,
) -> Result<EmOutput> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if (init.meta.t - grid.t0()).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "initial batch is valid at t = {}, grid starts at {}",
            init.meta.t,
            grid.t0()
        )));
    }
    let d = init.dim();
    check_dim(drift.dim(), d)?;
    let n = init.len();
    let points = grid.points();
    let n_steps = grid.n_steps();
    let keep = if options.record_trajectory {
        checkpoint_indices(n_steps, options.max_checkpoints)
    } else {
        Vec::new()
    };
    let meta_at = |t: f64| BatchMeta {
        seed,
        grid: Some(format!("{}(N={n_steps})", grid.label())),
        drift: Some(drift.id()),
        t,
    };

    let mut x = init.data().to_vec();
    let mut b = vec![0.0; n * d];
    let mut trajectory = Vec::with_capacity(keep.len());
    if keep.first() == Some(&0) {
        trajectory.push(SampleBatch::new(n, d, x.clone(), meta_at(points[0]))?);
    }
    for k in 0..n_steps {
        let (t, h) = (points[k], points[k + 1] - points[k]);
        drift.eval_batch(t, &x, &mut b)?;
        if let Some(pos) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::Blowup {
                step: k,
                t,
                sample: pos / d,
            });
        }
        let noise_scale = (2.0 * epsilon * h).sqrt();
        let key = StreamKey::new(seed, domain::SAMPLER_NOISE, k as u64);
        let bad = x
            .par_chunks_mut(d)
            .zip(b.par_chunks(d))
            .enumerate()
            .map(|(i, (xi, bi))| {
                let mut rng = (noise_scale > 0.0).then(|| key.stream(i as u64));
                let mut ok = true;
                for (xv, bv) in xi.iter_mut().zip(bi) {
                    *xv += h * bv;
                    if let Some(rng) = rng.as_mut() {
                        let w: f64 = rng.sample(StandardNormal);
                        *xv += noise_scale * w;
                    }
                    ok &= xv.abs() <= BLOWUP_THRESHOLD;
                }
                if ok {
                    usize::MAX
                } else {
                    i
                }
            })
            .min()
            .unwrap_or(usize::MAX);
        if bad != usize::MAX {
            return Err(Error::Blowup { step: k, t, sample: bad });
        }
        if keep.contains(&(k + 1)) {
            trajectory.push(SampleBatch::new(n, d, x.clone(), meta_at(points[k + 1]))?);
        }
    }
    Ok(EmOutput {
        batch: SampleBatch::new(n, d, x, meta_at(grid.tn()))?,
        trajectory,
    })
}

/// Draws of `ρ(t0)`: exact Gaussian-mixture marginal for Gaussian couplings,
/// the interpolant law otherwise.
pub fn initial_batch(config: &InterpolantConfig, coupling: &Coupling, n: usize, seed: u64) -> Result<SampleBatch> {
    config.validate()?;
    check_dim(config.dim, coupling.dim())?;
    match coupling {
        Coupling::PairedEmpirical { .. } => sample_interpolant(config, coupling, config.t0, n, seed),
        _ => TimeMarginal::for_coupling(coupling, config.gamma, config.t0)?.sample(n, seed),
    }
}

/// Draws from an explicitly supplied initial mixture, stamped as valid at `t0`.
pub fn initial_batch_from_mixture(rho_t0: &GaussianMixture, t0: f64, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut batch = rho_t0.sample(n, seed)?;
    batch.meta.t = t0;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{exp_decay_grid, uniform_grid};

    fn init(data: Vec<f64>, d: usize, t: f64) -> SampleBatch {
        let n = data.len() / d;
        SampleBatch::new(n, d, data, BatchMeta { t, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_drift_without_noise_is_identity() {
        let grid = uniform_grid(0.1, 0.9, 7).unwrap();
        let zero = FnDrift::new("zero", 2, |_, _, o: &mut [f64]| o.fill(0.0));
        let x0 = init(vec![1.0, 2.0, -3.0, 0.5], 2, 0.1);
        let out = euler_maruyama(&zero, &grid, 0.0, &x0, 1, EmOptions::default()).unwrap();
        assert_eq!(out.batch.data(), x0.data());
    }

    #[test]
    fn constant_drift_telescopes() {
        let grid = exp_decay_grid(0.01, 0.95, 0.2).unwrap();
        let c = [0.7, -1.3];
        let drift = FnDrift::new("const", 2, move |_, _, o: &mut [f64]| o.copy_from_slice(&c));
        let x0 = init(vec![0.0, 0.0, 1.0, 1.0], 2, 0.01);
        let out = euler_maruyama(&drift, &grid, 0.0, &x0, 1, EmOptions::default()).unwrap();
        let span = 0.95 - 0.01;
        for (row, start) in out.batch.rows().zip(x0.rows()) {
            for j in 0..2 {
                assert!((row[j] - (start[j] + span * c[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ou_step_preserves_unit_variance() {
        let n = 100_000;
        let grid = uniform_grid(0.4, 0.6, 200).unwrap();
        let x0 = GaussianMixture::standard_normal(1).unwrap().sample(n, 11).unwrap();
        let x0 = init(x0.into_data(), 1, 0.4);
        let ou = FnDrift::new("ou", 1, |_, x: &[f64], o: &mut [f64]| o[0] = -x[0]);
        let out = euler_maruyama(&ou, &grid, 1.0, &x0, 12, EmOptions::default()).unwrap();
        let var = out.batch.covariance()[0];
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn same_seed_same_output() {
        let grid = uniform_grid(0.2, 0.8, 5).unwrap();
        let ou = FnDrift::new("ou", 1, |_, x: &[f64], o: &mut [f64]| o[0] = -x[0]);
        let x0 = init(vec![0.1; 64], 1, 0.2);
        let a = euler_maruyama(&ou, &grid, 1.0, &x0, 3, EmOptions::default()).unwrap();
        let b = euler_maruyama(&ou, &grid, 1.0, &x0, 3, EmOptions::default()).unwrap();
        assert_eq!(a.batch, b.batch);
    }

    #[test]
    fn trajectory_respects_checkpoint_budget() {
        assert_eq!(checkpoint_indices(10, 3), vec![0, 5, 10]);
        assert_eq!(checkpoint_indices(2, 16), vec![0, 1, 2]);
        let grid = uniform_grid(0.2, 0.8, 40).unwrap();
        let zero = FnDrift::new("zero", 1, |_, _, o: &mut [f64]| o.fill(0.0));
        let x0 = init(vec![0.0; 8], 1, 0.2);
        let opts = EmOptions {
            record_trajectory: true,
            max_checkpoints: 16,
        };
        let out = euler_maruyama(&zero, &grid, 1.0, &x0, 3, opts).unwrap();
        assert_eq!(out.trajectory.len(), 16);
        assert_eq!(out.trajectory[0].meta.t, 0.2);
        assert_eq!(out.trajectory.last().unwrap().data(), out.batch.data());
    }

    #[test]
    fn blowup_is_reported_with_location() {
        let grid = uniform_grid(0.1, 0.9, 10).unwrap();
        let bad = FnDrift::new("bad", 1, |t, x: &[f64], o: &mut [f64]| {
            o[0] = if t > 0.45 && x[0] > 0.0 { f64::NAN } else { 0.0 }
        });
        let x0 = init(vec![-1.0, 1.0], 1, 0.1);
        match euler_maruyama(&bad, &grid, 0.0, &x0, 1, EmOptions::default()) {
            Err(Error::Blowup { step, sample, .. }) => assert_eq!((step, sample), (5, 1)),
            other => panic!("expected blowup, got {other:?}"),
        }
        let explode = FnDrift::new("explode", 1, |_, x: &[f64], o: &mut [f64]| o[0] = 1e3 * x[0]);
        let x0 = init(vec![1.0], 1, 0.1);
        assert!(matches!(
            euler_maruyama(&explode, &grid, 0.0, &x0, 1, EmOptions::default()),
            Err(Error::Blowup { .. })
        ));
    }

    #[test]
    fn start_time_must_match_grid() {
        let grid = uniform_grid(0.1, 0.9, 10).unwrap();
        let zero = FnDrift::new("zero", 1, |_, _, o: &mut [f64]| o.fill(0.0));
        let x0 = init(vec![0.0], 1, 0.2);
        assert!(matches!(
            euler_maruyama(&zero, &grid, 0.0, &x0, 1, EmOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn initial_batch_for_point_masses() {
        let cfg = InterpolantConfig::new(GammaFamily::BridgeScale { a: 2.0 }, 1.0, 0.001, 0.999, 1).unwrap();
        let coupling = Coupling::independent(
            GaussianMixture::point_mass(vec![-1.0]).unwrap(),
            GaussianMixture::point_mass(vec![3.0]).unwrap(),
        )
        .unwrap();
        let n = 200_000;
        let b = initial_batch(&cfg, &coupling, n, 5).unwrap();
        assert_eq!(b.meta.t, 0.001);
        let var: f64 = 2.0 * 0.001 * 0.999;
        let mean_expect = -0.999 + 0.001 * 3.0;
        assert!((b.mean()[0] - mean_expect).abs() < 4.0 * (var / n as f64).sqrt());
        assert!((b.covariance()[0] - var).abs() < 4.0 * var * (2.0 / n as f64).sqrt());
        assert_eq!(b, initial_batch(&cfg, &coupling, n, 5).unwrap());
    }

    #[test]
    fn analytic_drift_rejects_paired_coupling() {
        let cfg = InterpolantConfig::new(GammaFamily::BridgeScale { a: 2.0 }, 1.0, 0.001, 0.999, 1).unwrap();
        let c = Coupling::paired(vec![(vec![0.0], vec![1.0])]).unwrap();
        assert!(GmmDrift::new(c, &cfg).is_err());
    }
}
