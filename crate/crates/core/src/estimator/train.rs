use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::interpolant::{sample_interpolant, Coupling, InterpolantConfig};
use crate::sampler::DriftField;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{draw_training_batch, loss_and_grad, network_inputs};
use super::mlp::Mlp;

/// Optimization settings for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub t0: f64,
    pub tn: f64,
    pub seed: u64,
    pub lambda_b: f64,
    pub lambda_s: f64,
    pub lr_decay: LrDecay,
    /// Pair every latent draw with its negation.
    pub antithetic: bool,
}

/// Learning-rate profile over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    #[default]
    Cosine,
}

impl LrDecay {
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            batch_size: 512,
            steps: 20_000,
            hidden: vec![256, 256, 256],
            t0: 0.001,
            tn: 0.999,
            seed: 0,
            lambda_b: 1.0,
            lambda_s: 1.0,
            lr_decay: LrDecay::Cosine,
            antithetic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0 < self.t0 && self.t0 < self.tn && self.tn < 1.0) {
            return Err(Error::Config(format!("need 0 < t0 < tN < 1, got t0 = {}, tN = {}", self.t0, self.tn)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.lambda_b >= 0.0 && self.lambda_s >= 0.0 && self.lambda_b + self.lambda_s > 0.0) {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        Ok(())
    }

    fn widths(&self, dim: usize) -> Vec<usize> {
        let mut w = vec![dim + 1];
        w.extend(&self.hidden);
        w.push(2 * dim);
        w
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.betas.0,
            beta2: self.betas.1,
            ..Default::default()
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub total: f64,
    pub loss_b: f64,
    pub loss_s: f64,
}

/// A trained two-head network used as `b̂_F = v̂ + (ε − γγ̇) ŝ`.
#[derive(Debug, Clone)]
pub struct LearnedDrift {
    net: Mlp,
    interpolant: InterpolantConfig,
    train: TrainConfig,
    trace: Vec<TraceEntry>,
}

const EVAL_CHUNK: usize = 2048;

impl LearnedDrift {
    pub fn new(net: Mlp, interpolant: InterpolantConfig, train: TrainConfig) -> Result<Self> {
        interpolant.validate()?;
        let d = interpolant.dim;
        if net.input_dim() != d + 1 || net.output_dim() != 2 * d {
            return Err(Error::Config(format!("network widths {:?} do not fit dimension {d}", net.widths())));
        }
        Ok(Self {
            net,
            interpolant,
            train,
            trace: Vec::new(),
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn interpolant(&self) -> &InterpolantConfig {
        &self.interpolant
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Same network driving the SDE at a different diffusion level.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        self.interpolant.epsilon = epsilon;
        self.interpolant.validate()?;
        Ok(self)
    }

    /// Row-major `(v̂, ŝ)` at time `t` for every row of `xs`.
    pub fn heads(&self, t: f64, xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.interpolant.dim;
        if !xs.len().is_multiple_of(d) {
            return Err(Error::Shape {
                expected: d,
                got: xs.len() % d,
            });
        }
        let mut v = vec![0.0; xs.len()];
        let mut s = vec![0.0; xs.len()];
        v.par_chunks_mut(EVAL_CHUNK * d)
            .zip(s.par_chunks_mut(EVAL_CHUNK * d))
            .zip(xs.par_chunks(EVAL_CHUNK * d))
            .for_each(|((v, s), x)| {
                let rows = x.len() / d;
                let out = self.net.forward(&network_inputs(&vec![t; rows], x, d));
                for i in 0..rows {
                    for j in 0..d {
                        v[i * d + j] = out[(i, j)];
                        s[i * d + j] = out[(i, d + j)];
                    }
                }
            });
        Ok((v, s))
    }
}

impl DriftField for LearnedDrift {
    fn id(&self) -> String {
        format!(
            "mlp{:?}[{}, eps={}, seed={}]",
            self.net.widths(),
            self.interpolant.gamma.label(),
            self.interpolant.epsilon,
            self.train.seed
        )
    }

    fn dim(&self) -> usize {
        self.interpolant.dim
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(xs.len(), out.len())?;
        let c = self.interpolant.epsilon - self.interpolant.gamma.eval(t)?.gamma_gamma_dot();
        let (v, s) = self.heads(t, xs)?;
        for ((o, v), s) in out.iter_mut().zip(v).zip(s) {
            *o = v + c * s;
        }
        Ok(())
    }
}

/// Minimizes `λ_b L_b + λ_s L_s` with Adam and returns the learned drift.
pub fn train(coupling: &Coupling, config: &InterpolantConfig, tc: &TrainConfig) -> Result<LearnedDrift> {
    train_with_progress(coupling, config, tc, |_| {})
}

/// Like [`train`], calling `progress` after every step.
pub fn train_with_progress(
    coupling: &Coupling,
    config: &InterpolantConfig,
    tc: &TrainConfig,
    mut progress: impl FnMut(&TraceEntry),
) -> Result<LearnedDrift> {
    config.validate()?;
    tc.validate()?;
    coupling.validate()?;
    check_dim(config.dim, coupling.dim())?;
    let net = Mlp::new(tc.widths(config.dim), tc.seed)?;
    let mut drift = LearnedDrift::new(net, *config, tc.clone())?;
    let mut adam = tc.adam();
    let mut state = AdamState::new(drift.net.n_params());
    drift.trace.reserve(tc.steps);
    for step in 0..tc.steps {
        let batch = draw_training_batch(coupling, config.gamma, tc.t0, tc.tn, tc.batch_size, tc.seed, step as u64, tc.antithetic)?;
        let lg = loss_and_grad(&drift.net, &batch, tc.lambda_b, tc.lambda_s)?;
        if !lg.total.is_finite() {
            return Err(Error::Diverged(format!("loss became {} at step {step}", lg.total)));
        }
        adam.learning_rate = tc.learning_rate * tc.lr_decay.factor(step, tc.steps);
        adam_step(drift.net.params_mut(), &lg.grad, &mut state, &adam)
            .map_err(|e| Error::Diverged(format!("step {step}: {e}")))?;
        let entry = TraceEntry {
            step,
            total: lg.total,
            loss_b: lg.loss_b,
            loss_s: lg.loss_s,
        };
        progress(&entry);
        drift.trace.push(entry);
    }
    Ok(drift)
}

const CHECKPOINT_FORMAT: &str = "stochinterp-mlp/1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    widths: Vec<usize>,
    seed: u64,
    interpolant: InterpolantConfig,
    train: TrainConfig,
    param_count: usize,
    params_file: String,
    dtype: String,
}

fn params_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (JSON manifest) and a sibling `.bin` file of parameters.
pub fn save_checkpoint(drift: &LearnedDrift, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bin = params_path(path);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        widths: drift.net.widths().to_vec(),
        seed: drift.train.seed,
        interpolant: drift.interpolant,
        train: drift.train.clone(),
        param_count: drift.net.n_params(),
        params_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
        dtype: "f64-le".into(),
    };
    let bytes: Vec<u8> = drift.net.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LearnedDrift> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f64-le" {
        return Err(Error::Config(format!(
            "{} is not a supported checkpoint (format {}, dtype {})",
            path.display(),
            manifest.format,
            manifest.dtype
        )));
    }
    let bin = path.with_file_name(&manifest.params_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != 8 * manifest.param_count {
        return Err(Error::Config(format!(
            "{} holds {} bytes, expected {}",
            bin.display(),
            bytes.len(),
            8 * manifest.param_count
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = Mlp::from_params(manifest.widths, params)?;
    LearnedDrift::new(net, manifest.interpolant, manifest.train)
}

/// ρ(t, x)-weighted mean squared error of `drift` against `reference` over
/// draws of the interpolant at each time in `times`.
pub fn weighted_drift_mse(
    drift: &dyn DriftField,
    reference: &dyn DriftField,
    config: &InterpolantConfig,
    coupling: &Coupling,
    times: &[f64],
    n_per_time: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for &t in times {
        let xs = sample_interpolant(config, coupling, t, n_per_time, seed)?;
        let mut a = vec![0.0; xs.data().len()];
        let mut b = vec![0.0; xs.data().len()];
        drift.eval_batch(t, xs.data(), &mut a)?;
        reference.eval_batch(t, xs.data(), &mut b)?;
        total += a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / n_per_time as f64;
    }
    Ok(total / times.len() as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianMixture;
    use crate::interpolant::GammaFamily;

    fn gaussian_setup() -> (Coupling, InterpolantConfig) {
        let c = Coupling::independent(GaussianMixture::standard_normal(1).unwrap(), GaussianMixture::standard_normal(1).unwrap())
            .unwrap();
        let cfg = InterpolantConfig::new(GammaFamily::BridgeScale { a: 2.0 }, 1.0, 0.001, 0.999, 1).unwrap();
        (c, cfg)
    }

    fn small(steps: usize) -> TrainConfig {
        TrainConfig {
            hidden: vec![32, 32],
            steps,
            batch_size: 256,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { t0: 0.6, tn: 0.4, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn trace_is_finite_and_decreasing() {
        let (c, cfg) = gaussian_setup();
        let drift = train(&c, &cfg, &small(600)).unwrap();
        let trace = drift.trace();
        assert_eq!(trace.len(), 600);
        assert!(trace.iter().all(|e| e.total.is_finite()));
        let avg = |r: &[TraceEntry]| r.iter().map(|e| e.total).sum::<f64>() / r.len() as f64;
        assert!(avg(&trace[500..]) < avg(&trace[..100]));
    }

    #[test]
    fn training_is_deterministic() {
        let (c, cfg) = gaussian_setup();
        let a = train(&c, &cfg, &small(20)).unwrap();
        let b = train(&c, &cfg, &small(20)).unwrap();
        assert_eq!(a.net().params(), b.net().params());
    }

    #[test]
    fn score_head_learns_gaussian_score() {
        // Both ends N(0, 1) and γ²(½) = ½, so x_½ ~ N(0, 1) with score −x.
        let (c, cfg) = gaussian_setup();
        let tc = TrainConfig {
            hidden: vec![64, 64],
            steps: 12_000,
            ..small(0)
        };
        let drift = train(&c, &cfg, &tc).unwrap();
        let xs = [-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0];
        let (_, s) = drift.heads(0.5, &xs).unwrap();
        for (x, s) in xs.iter().zip(&s) {
            let rel = (s + x).abs() / x.abs();
            assert!(rel < 0.1, "x = {x}: score {s}");
        }
    }

    #[test]
    fn drift_combines_heads() {
        let (c, cfg) = gaussian_setup();
        let drift = train(&c, &cfg, &small(5)).unwrap().with_epsilon(0.3).unwrap();
        let xs = [0.2, -1.0, 3.0];
        let t = 0.25;
        let (v, s) = drift.heads(t, &xs).unwrap();
        let mut out = [0.0; 3];
        drift.eval_batch(t, &xs, &mut out).unwrap();
        let gg = cfg.gamma.eval(t).unwrap().gamma_gamma_dot();
        for i in 0..3 {
            assert!((out[i] - (v[i] + (0.3 - gg) * s[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (c, cfg) = gaussian_setup();
        let drift = train(&c, &cfg, &small(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_checkpoint(&drift, &path).unwrap();
        assert!(dir.path().join("net.bin").exists());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.net(), drift.net());
        assert_eq!(back.interpolant(), drift.interpolant());
        assert_eq!(back.train_config(), drift.train_config());
        let missing = load_checkpoint(dir.path().join("nope.json")).unwrap_err();
        assert!(missing.to_string().contains("nope.json"));
    }
}
