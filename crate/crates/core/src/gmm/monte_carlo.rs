//! Self-normalized importance estimate of `E[f(x0, x1, z) | x_t = x]`.
//!
//! Given `x_t = x`, the pair `(x0, x1)` has law proportional to
//! `ν(dx0, dx1) · exp(−‖x − I(t, x0, x1)‖² / 2γ²(t))`, and `z` is the
//! deterministic residual `(x − I) / γ`. Draws come from the coupling itself
//! and are reweighted accordingly. The estimate is exact in expectation but
//! degrades as `γ(t) → 0`, which the effective sample size exposes.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::interpolant::{interpolate_into, Coupling, GammaFamily};
use crate::rng::{domain, StreamKey};

/// Result of [`mc_conditional_expectation`].
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    /// Delta-method standard error per output coordinate.
    pub std_err: Vec<f64>,
    /// `(Σ w)² / Σ w²`.
    pub ess: f64,
    /// Set when `ess` is below the requested floor.
    pub unreliable: bool,
}

/// Draws of `(x0, x1, z)` fed to the integrand.
pub struct Draw<'a> {
    pub x0: &'a [f64],
    pub x1: &'a [f64],
    pub z: &'a [f64],
    pub gamma: f64,
}

/// Estimates `E[f | x_t = x]` from `n` coupling draws.
///
/// `out_dim` is the length of the vector `f` writes. Estimates whose effective
/// sample size falls below `ess_floor` are returned with `unreliable = true`.
#[allow(clippy::too_many_arguments)]
pub fn mc_conditional_expectation<F>(
    coupling: &Coupling,
    gamma: GammaFamily,
    t: f64,
    x: &[f64],
    out_dim: usize,
    f: F,
    n: usize,
    seed: u64,
    ess_floor: f64,
) -> Result<McEstimate>
where
    F: Fn(&Draw<'_>, &mut [f64]) + Sync,
{
    coupling.validate()?;
    let d = coupling.dim();
    check_dim(d, x.len())?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("t = {t} must lie in (0, 1)")));
    }
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let g = gamma.gamma(t);
    let inv_two_g2 = 0.5 / (g * g);
    let key = StreamKey::new(seed, domain::MONTE_CARLO, t.to_bits());

    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; 4 * d],
            |buf, i| {
                let mut rng = key.stream(i as u64);
                let (scratch, rest) = buf.split_at_mut(d);
                let (x0, rest) = rest.split_at_mut(d);
                let (x1, z) = rest.split_at_mut(d);
                coupling.draw_into(&mut rng, scratch, x0, x1);
                interpolate_into(t, x0, x1, z);
                let mut sq = 0.0;
                for (zi, xi) in z.iter_mut().zip(x) {
                    let r = xi - *zi;
                    sq += r * r;
                    *zi = r / g;
                }
                let mut value = vec![0.0; out_dim];
                f(&Draw { x0, x1, z, gamma: g }, &mut value);
                (-sq * inv_two_g2, value)
            },
        )
        .collect();

    let max = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = rows.iter().map(|r| (r.0 - max).exp()).collect();
    let w_sum: f64 = weights.iter().sum();
    let w_sq: f64 = weights.iter().map(|w| w * w).sum();
    let mut mean = vec![0.0; out_dim];
    for (w, (_, v)) in weights.iter().zip(&rows) {
        for (m, vi) in mean.iter_mut().zip(v) {
            *m += w * vi;
        }
    }
    mean.iter_mut().for_each(|m| *m /= w_sum);
    let mut var = vec![0.0; out_dim];
    for (w, (_, v)) in weights.iter().zip(&rows) {
        let wn = w / w_sum;
        for ((s, vi), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += wn * wn * (vi - m) * (vi - m);
        }
    }
    let ess = w_sum * w_sum / w_sq;
    Ok(McEstimate {
        mean,
        std_err: var.into_iter().map(f64::sqrt).collect(),
        ess,
        unreliable: ess < ess_floor,
    })
}

/// Integrand `x1 − x0` (velocity).
pub fn displacement(draw: &Draw<'_>, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(draw.x0).zip(draw.x1) {
        *o = b - a;
    }
}

/// Integrand `−z / γ` (score).
pub fn negative_scaled_latent(draw: &Draw<'_>, out: &mut [f64]) {
    for (o, z) in out.iter_mut().zip(draw.z) {
        *o = -z / draw.gamma;
    }
}

/// Concatenation `(x1 − x0, −z/γ)`, so one pass estimates velocity and score.
pub fn velocity_and_score(draw: &Draw<'_>, out: &mut [f64]) {
    let d = draw.x0.len();
    let (v, s) = out.split_at_mut(d);
    displacement(draw, v);
    negative_scaled_latent(draw, s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{time_marginal, GaussianMixture};

    const BRIDGE2: GammaFamily = GammaFamily::BridgeScale { a: 2.0 };

    fn std_coupling() -> Coupling {
        let g = GaussianMixture::standard_normal(1).unwrap();
        Coupling::independent(g.clone(), g).unwrap()
    }

    #[test]
    fn constant_integrand_is_exact() {
        let est = mc_conditional_expectation(
            &std_coupling(),
            BRIDGE2,
            0.3,
            &[0.8],
            2,
            |_, out| out.copy_from_slice(&[1.25, -4.0]),
            5000,
            1,
            10.0,
        )
        .unwrap();
        assert!((est.mean[0] - 1.25).abs() < 1e-12);
        assert!((est.mean[1] + 4.0).abs() < 1e-12);
        assert!(!est.unreliable);
    }

    #[test]
    fn symmetric_velocity_vanishes() {
        let est =
            mc_conditional_expectation(&std_coupling(), BRIDGE2, 0.5, &[0.0], 1, displacement, 200_000, 2, 10.0)
                .unwrap();
        assert!(est.mean[0].abs() < 4.0 * est.std_err[0], "{est:?}");
    }

    #[test]
    fn score_estimate_matches_closed_form() {
        let rho0 = GaussianMixture::isotropic(vec![0.4, 0.6], vec![vec![-1.0], vec![1.5]], 0.5).unwrap();
        let rho1 = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0], vec![3.0]], 0.3).unwrap();
        let coupling = Coupling::independent(rho0.clone(), rho1.clone()).unwrap();
        let (t, x) = (0.4, 0.6);
        let exact = time_marginal(&rho0, &rho1, BRIDGE2, t).unwrap().score(&[x]).unwrap()[0];
        let est = mc_conditional_expectation(
            &coupling,
            BRIDGE2,
            t,
            &[x],
            1,
            negative_scaled_latent,
            1_000_000,
            3,
            10.0,
        )
        .unwrap();
        assert!((est.mean[0] - exact).abs() / exact.abs() < 1e-2, "{} vs {exact}", est.mean[0]);
    }

    #[test]
    fn low_ess_is_flagged() {
        let est =
            mc_conditional_expectation(&std_coupling(), BRIDGE2, 0.001, &[3.0], 1, displacement, 1000, 4, 100.0)
                .unwrap();
        assert!(est.unreliable);
        assert!(est.ess < 100.0);
    }

    #[test]
    fn rejects_endpoint_times() {
        let r = mc_conditional_expectation(&std_coupling(), BRIDGE2, 0.0, &[0.0], 1, displacement, 10, 1, 1.0);
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
