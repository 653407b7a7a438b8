//! Quadratic regression objectives whose minimizers are the velocity-drift
//! `b = v − γγ̇ s` and the score `s`, plus the γ⁻² time sampler.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interpolant::{draw_tuple_into, Coupling, GammaFamily};
use crate::rng::{domain, StreamKey};

use super::mlp::Mlp;

/// Minibatch of interpolant draws with everything the losses need.
///
/// Vectors are row-major `n × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub dim: usize,
    pub t: Vec<f64>,
    pub xt: Vec<f64>,
    /// `∂_t I = x1 − x0`.
    pub d_interp: Vec<f64>,
    pub z: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_gamma_dot: Vec<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Rejects endpoint times, where the latent coefficient is undefined.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, len) in [("xt", self.xt.len()), ("d_interp", self.d_interp.len()), ("z", self.z.len())] {
            if len != n * self.dim {
                return Err(Error::Config(format!("training batch field {name} has length {len}, expected {}", n * self.dim)));
            }
        }
        if self.gamma.len() != n || self.gamma_gamma_dot.len() != n {
            return Err(Error::Config("training batch per-sample fields disagree in length".into()));
        }
        if let Some(i) = self.t.iter().position(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Domain(format!("training time t = {} at row {i} must lie in (0, 1)", self.t[i])));
        }
        Ok(())
    }

    /// Network input `[t, x]` per row.
    pub fn inputs(&self) -> DMatrix<f64> {
        network_inputs(&self.t, &self.xt, self.dim)
    }

    /// Per-row regression target of the drift head: `∂_t I + (γγ̇/γ) z`.
    pub fn drift_target(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = self.d_interp.clone();
        for i in 0..self.len() {
            let c = self.gamma_gamma_dot[i] / self.gamma[i];
            for j in 0..d {
                out[i * d + j] += c * self.z[i * d + j];
            }
        }
        out
    }

    /// Per-row regression target of the score head: `−z/γ`.
    pub fn score_target(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.z.len()];
        for i in 0..self.len() {
            for j in 0..d {
                out[i * d + j] = -self.z[i * d + j] / self.gamma[i];
            }
        }
        out
    }
}

pub(crate) fn network_inputs(t: &[f64], xs: &[f64], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t.len(), dim + 1, |i, j| if j == 0 { t[i] } else { xs[i * dim + j - 1] })
}

/// `b̂ = v̂ − γγ̇ ŝ`, row-major.
pub fn compose_drift(batch: &TrainingBatch, v_hat: &[f64], s_hat: &[f64]) -> Vec<f64> {
    let d = batch.dim;
    let mut b = v_hat.to_vec();
    for (i, row) in b.chunks_mut(d).enumerate() {
        let gg = batch.gamma_gamma_dot[i];
        for (bj, sj) in row.iter_mut().zip(&s_hat[i * d..(i + 1) * d]) {
            *bj -= gg * sj;
        }
    }
    b
}

fn quadratic_loss(estimate: &[f64], target: &[f64], n: usize) -> f64 {
    let total: f64 = estimate.iter().zip(target).map(|(e, y)| 0.5 * e * e - y * e).sum();
    total / n as f64
}

/// Drift objective evaluated on given head outputs.
pub fn loss_b_from_heads(batch: &TrainingBatch, v_hat: &[f64], s_hat: &[f64]) -> Result<f64> {
    batch.validate()?;
    let b = compose_drift(batch, v_hat, s_hat);
    Ok(quadratic_loss(&b, &batch.drift_target(), batch.len()))
}

/// Score objective evaluated on a given score head.
pub fn loss_s_from_heads(batch: &TrainingBatch, s_hat: &[f64]) -> Result<f64> {
    batch.validate()?;
    Ok(quadratic_loss(s_hat, &batch.score_target(), batch.len()))
}

/// Splits an `n × 2d` output into row-major `v̂` and `ŝ`.
pub fn split_heads(output: &DMatrix<f64>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = output.nrows();
    let mut v = vec![0.0; n * dim];
    let mut s = vec![0.0; n * dim];
    for i in 0..n {
        for j in 0..dim {
            v[i * dim + j] = output[(i, j)];
            s[i * dim + j] = output[(i, dim + j)];
        }
    }
    (v, s)
}

fn check_net(net: &Mlp, dim: usize) -> Result<()> {
    if net.input_dim() != dim + 1 || net.output_dim() != 2 * dim {
        return Err(Error::Config(format!(
            "network widths {:?} do not fit dimension {dim} (need input {} and output {})",
            net.widths(),
            dim + 1,
            2 * dim
        )));
    }
    Ok(())
}

pub fn loss_b(net: &Mlp, batch: &TrainingBatch) -> Result<f64> {
    check_net(net, batch.dim)?;
    let (v, s) = split_heads(&net.forward(&batch.inputs()), batch.dim);
    loss_b_from_heads(batch, &v, &s)
}

pub fn loss_s(net: &Mlp, batch: &TrainingBatch) -> Result<f64> {
    check_net(net, batch.dim)?;
    let (_, s) = split_heads(&net.forward(&batch.inputs()), batch.dim);
    loss_s_from_heads(batch, &s)
}

/// Value of `λ_b L_b + λ_s L_s` with its parts and parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub total: f64,
    pub loss_b: f64,
    pub loss_s: f64,
    pub grad: Vec<f64>,
}

pub fn loss_and_grad(net: &Mlp, batch: &TrainingBatch, lambda_b: f64, lambda_s: f64) -> Result<LossAndGrad> {
    batch.validate()?;
    check_net(net, batch.dim)?;
    let d = batch.dim;
    let n = batch.len();
    let cache = net.forward_cached(batch.inputs());
    let (v, s) = split_heads(cache.output(), d);
    let b = compose_drift(batch, &v, &s);
    let tb = batch.drift_target();
    let ts = batch.score_target();
    let lb = quadratic_loss(&b, &tb, n);
    let ls = quadratic_loss(&s, &ts, n);

    // ∂L_b/∂b̂ = (b̂ − target)/n feeds v̂ directly and ŝ through −γγ̇.
    let inv_n = 1.0 / n as f64;
    let mut g = DMatrix::zeros(n, 2 * d);
    for i in 0..n {
        let gg = batch.gamma_gamma_dot[i];
        for j in 0..d {
            let k = i * d + j;
            let gb = lambda_b * (b[k] - tb[k]) * inv_n;
            let gs = lambda_s * (s[k] - ts[k]) * inv_n;
            g[(i, j)] = gb;
            g[(i, d + j)] = gs - gg * gb;
        }
    }
    let grad = net.backward(&cache, g);
    Ok(LossAndGrad {
        total: lambda_b * lb + lambda_s * ls,
        loss_b: lb,
        loss_s: ls,
        grad,
    })
}

/// Antiderivative of `1/((1 − t)² t)`.
fn asymmetric_antiderivative(t: f64) -> f64 {
    (t / (1.0 - t)).ln() + 1.0 / (1.0 - t)
}

fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

fn logistic(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

/// Maps `u ∈ [0, 1]` through the inverse CDF of the density `∝ γ⁻²(t)` on
/// `[t0, tN]`.
pub fn training_time_from_uniform(gamma: GammaFamily, t0: f64, tn: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return t0;
    }
    if u >= 1.0 {
        return tn;
    }
    match gamma {
        GammaFamily::BridgeScale { .. } => {
            let (lo, hi) = (logit(t0), logit(tn));
            logistic(lo + u * (hi - lo)).clamp(t0, tn)
        }
        GammaFamily::AsymmetricScale => {
            let (f0, f1) = (asymmetric_antiderivative(t0), asymmetric_antiderivative(tn));
            let target = f0 + u * (f1 - f0);
            let (mut lo, mut hi) = (t0, tn);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if asymmetric_antiderivative(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    }
}

/// Draws a training time with density `∝ γ⁻²(t)` on `[t0, tN]`.
pub fn sample_training_time<R: Rng + ?Sized>(gamma: GammaFamily, t0: f64, tn: f64, rng: &mut R) -> Result<f64> {
    if !(0.0 < t0 && t0 < tn && tn < 1.0) {
        return Err(Error::Config(format!("need 0 < t0 < tN < 1, got t0 = {t0}, tN = {tn}")));
    }
    Ok(training_time_from_uniform(gamma, t0, tn, rng.random()))
}

/// Normalized density of the training-time law.
pub fn training_time_density(gamma: GammaFamily, t0: f64, tn: f64, t: f64) -> f64 {
    if !(t0..=tn).contains(&t) {
        return 0.0;
    }
    match gamma {
        GammaFamily::BridgeScale { .. } => 1.0 / (t * (1.0 - t) * (logit(tn) - logit(t0))),
        GammaFamily::AsymmetricScale => {
            1.0 / ((1.0 - t) * (1.0 - t) * t * (asymmetric_antiderivative(tn) - asymmetric_antiderivative(t0)))
        }
    }
}

/// Draws a minibatch for optimizer step `step`; each sample has its own stream.
///
/// With `antithetic`, rows come in pairs sharing `(t, x0, x1)` with latents
/// `z` and `−z`; both objectives keep their expectation.
pub fn draw_training_batch(
    coupling: &Coupling,
    gamma: GammaFamily,
    t0: f64,
    tn: f64,
    n: usize,
    seed: u64,
    step: u64,
    antithetic: bool,
) -> Result<TrainingBatch> {
    if n == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let d = coupling.dim();
    let key = StreamKey::new(seed, domain::TRAINING, step);
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mirrored = antithetic && i % 2 == 1;
            let mut rng = key.stream(if antithetic { i as u64 / 2 } else { i as u64 });
            let t = training_time_from_uniform(gamma, t0, tn, rng.random());
            let mut buf = vec![0.0; 5 * d];
            let (scratch, rest) = buf.split_at_mut(d);
            let (x0, rest) = rest.split_at_mut(d);
            let (x1, rest) = rest.split_at_mut(d);
            let (z, xt) = rest.split_at_mut(d);
            draw_tuple_into(gamma, coupling, t, &mut rng, scratch, x0, x1, z, xt);
            if mirrored {
                let g = gamma.gamma(t);
                for (x, zi) in xt.iter_mut().zip(z.iter_mut()) {
                    *x -= 2.0 * g * *zi;
                    *zi = -*zi;
                }
            }
            for (a, b) in x0.iter_mut().zip(x1.iter()) {
                *a = b - *a;
            }
            (t, buf)
        })
        .collect();
    let mut batch = TrainingBatch {
        dim: d,
        t: Vec::with_capacity(n),
        xt: Vec::with_capacity(n * d),
        d_interp: Vec::with_capacity(n * d),
        z: Vec::with_capacity(n * d),
        gamma: Vec::with_capacity(n),
        gamma_gamma_dot: Vec::with_capacity(n),
    };
    for (t, buf) in rows {
        let gv = gamma.eval(t)?;
        batch.t.push(t);
        batch.gamma.push(gv.gamma);
        batch.gamma_gamma_dot.push(gv.gamma_gamma_dot());
        batch.d_interp.extend_from_slice(&buf[d..2 * d]);
        batch.z.extend_from_slice(&buf[3 * d..4 * d]);
        batch.xt.extend_from_slice(&buf[4 * d..5 * d]);
    }
    Ok(batch)
}
