//! Closed-form time marginals of the linear interpolant between Gaussian
//! mixtures, and the score, velocity and drift fields they induce.
//!
//! For a pair of components `(i, j)` with `x0 ~ N(μ0_i, Σ0_i)`,
//! `x1 ~ N(μ1_j, Σ1_j)` drawn independently,
//!
//! ```text
//! x_t | ij ~ N(m_ij, C_ij),  m_ij = (1−t)μ0_i + tμ1_j,
//!                            C_ij = (1−t)²Σ0_i + t²Σ1_j + γ²(t)I
//! E[x0 | ij, x] = μ0_i + (1−t)Σ0_i C_ij⁻¹(x − m_ij)
//! E[x1 | ij, x] = μ1_j + tΣ1_j C_ij⁻¹(x − m_ij)
//! ```
//!
//! Mixture-level quantities weight the per-pair ones by posterior
//! responsibilities computed in log space.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::batch::{BatchMeta, SampleBatch};
use crate::error::{check_dim, Error, Result};
use crate::gmm::GaussianMixture;
use crate::interpolant::{Coupling, GammaFamily, InterpolantConfig};
use crate::linalg::{mat_vec, CholeskyFactor};
use crate::rng::{domain, StreamKey};

/// One Gaussian component of the time marginal.
#[derive(Debug, Clone)]
pub struct PairComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    factor: CholeskyFactor,
    /// `log w − ½ log det C − (d/2) log 2π`.
    log_norm: f64,
    velocity_offset: Vec<f64>,
    velocity_gain: Vec<f64>,
}

/// Law of `x_t` under a Gaussian-mixture coupling.
#[derive(Debug, Clone)]
pub struct TimeMarginal {
    t: f64,
    gamma_sq: f64,
    gamma_gamma_dot: f64,
    dim: usize,
    components: Vec<PairComponent>,
}

/// Reusable buffers for field evaluation.
#[derive(Debug, Clone)]
pub struct MarginalScratch {
    diff: Vec<f64>,
    whitened: Vec<f64>,
    solved: Vec<f64>,
    log_terms: Vec<f64>,
    tmp: Vec<f64>,
}

impl MarginalScratch {
    pub fn new(tm: &TimeMarginal) -> Self {
        let (d, k) = (tm.dim, tm.components.len());
        Self {
            diff: vec![0.0; d],
            whitened: vec![0.0; d],
            solved: vec![0.0; k * d],
            log_terms: vec![0.0; k],
            tmp: vec![0.0; d],
        }
    }
}

/// Time marginal under the independent coupling of `rho0` and `rho1`.
pub fn time_marginal(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    gamma: GammaFamily,
    t: f64,
) -> Result<TimeMarginal> {
    check_dim(rho0.dim(), rho1.dim())?;
    let pairs = (0..rho0.n_components())
        .flat_map(|i| (0..rho1.n_components()).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, rho0.weights()[i] * rho1.weights()[j]))
        .collect::<Vec<_>>();
    TimeMarginal::from_pairs(rho0, rho1, &pairs, gamma, t)
}

impl TimeMarginal {
    /// Time marginal for any Gaussian-mixture coupling.
    pub fn for_coupling(coupling: &Coupling, gamma: GammaFamily, t: f64) -> Result<Self> {
        match coupling {
            Coupling::IndependentProduct { rho0, rho1 } => time_marginal(rho0, rho1, gamma, t),
            Coupling::MatchedComponents { rho0, rho1 } => {
                coupling.validate()?;
                let pairs = rho0
                    .weights()
                    .iter()
                    .enumerate()
                    .map(|(i, w)| (i, i, *w))
                    .collect::<Vec<_>>();
                Self::from_pairs(rho0, rho1, &pairs, gamma, t)
            }
            Coupling::PairedEmpirical { .. } => Err(Error::Config(
                "analytic marginals need a Gaussian-mixture coupling".into(),
            )),
        }
    }

    fn from_pairs(
        rho0: &GaussianMixture,
        rho1: &GaussianMixture,
        pairs: &[(usize, usize, f64)],
        gamma: GammaFamily,
        t: f64,
    ) -> Result<Self> {
        let g = gamma.eval(t)?;
        let gamma_sq = gamma.gamma_sq(t).max(0.0);
        let d = rho0.dim();
        let (a0, a1) = (1.0 - t, t);
        let mut components = Vec::with_capacity(pairs.len());
        for &(i, j, weight) in pairs {
            let (mu0, mu1) = (&rho0.means()[i], &rho1.means()[j]);
            let (s0, s1) = (rho0.covariance_of(i), rho1.covariance_of(j));
            let mean: Vec<f64> = mu0.iter().zip(mu1).map(|(a, b)| a0 * a + a1 * b).collect();
            let mut covariance: Vec<f64> = s0.iter().zip(s1).map(|(a, b)| a0 * a0 * a + a1 * a1 * b).collect();
            for k in 0..d {
                covariance[k * d + k] += gamma_sq;
            }
            let factor = CholeskyFactor::new(d, &covariance).map_err(|e| match e {
                Error::Degenerate(msg) => {
                    Error::Degenerate(format!("pair component ({i}, {j}) at t = {t}: {msg}"))
                }
                other => other,
            })?;
            let log_norm = weight.ln() - 0.5 * factor.log_det() - 0.5 * d as f64 * (2.0 * PI).ln();
            components.push(PairComponent {
                weight,
                velocity_offset: mu1.iter().zip(mu0).map(|(b, a)| b - a).collect(),
                velocity_gain: s1.iter().zip(s0).map(|(b, a)| a1 * b - a0 * a).collect(),
                mean,
                covariance,
                factor,
                log_norm,
            });
        }
        Ok(Self {
            t,
            gamma_sq,
            gamma_gamma_dot: g.gamma_gamma_dot(),
            dim: d,
            components,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn gamma_sq(&self) -> f64 {
        self.gamma_sq
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[PairComponent] {
        &self.components
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_dim(self.dim, x.len())?;
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("NaN in evaluation point".into()));
        }
        Ok(())
    }

    /// Fills per-component log terms and `C⁻¹(x − m)`; returns the log density.
    fn eval_components(&self, x: &[f64], s: &mut MarginalScratch) -> f64 {
        let d = self.dim;
        for (k, c) in self.components.iter().enumerate() {
            for ((o, a), b) in s.diff.iter_mut().zip(x).zip(&c.mean) {
                *o = a - b;
            }
            c.factor.solve_lower(&s.diff, &mut s.whitened);
            let quad: f64 = s.whitened.iter().map(|v| v * v).sum();
            s.log_terms[k] = c.log_norm - 0.5 * quad;
            c.factor.solve_upper(&s.whitened, &mut s.solved[k * d..(k + 1) * d]);
        }
        let max = s.log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in s.log_terms.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in s.log_terms.iter_mut() {
            *v /= total;
        }
        max + total.ln()
    }

    /// `log ρ(t, x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let mut s = MarginalScratch::new(self);
        Ok(self.eval_components(x, &mut s))
    }

    /// Posterior probabilities of the pair components given `x_t = x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut s = MarginalScratch::new(self);
        self.eval_components(x, &mut s);
        Ok(s.log_terms)
    }

    /// Score and velocity at `x` written into the output slices.
    pub fn fields_into(&self, x: &[f64], s: &mut MarginalScratch, score: &mut [f64], velocity: &mut [f64]) {
        let d = self.dim;
        self.eval_components(x, s);
        score.iter_mut().for_each(|v| *v = 0.0);
        velocity.iter_mut().for_each(|v| *v = 0.0);
        for (k, c) in self.components.iter().enumerate() {
            let r = s.log_terms[k];
            if r == 0.0 {
                continue;
            }
            let solved = &s.solved[k * d..(k + 1) * d];
            mat_vec(d, &c.velocity_gain, solved, &mut s.tmp);
            for i in 0..d {
                score[i] -= r * solved[i];
                velocity[i] += r * (c.velocity_offset[i] + s.tmp[i]);
            }
        }
    }

    /// `∇ log ρ(t, x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut s = MarginalScratch::new(self);
        let (mut sc, mut v) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        self.fields_into(x, &mut s, &mut sc, &mut v);
        Ok(sc)
    }

    /// `E[x1 − x0 | x_t = x]`.
    pub fn velocity(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut s = MarginalScratch::new(self);
        let (mut sc, mut v) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        self.fields_into(x, &mut s, &mut sc, &mut v);
        Ok(v)
    }

    /// Forward drift `b_F = v + (ε − γγ̇) s`.
    pub fn drift(&self, epsilon: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut s = MarginalScratch::new(self);
        let mut out = vec![0.0; self.dim];
        let mut sc = vec![0.0; self.dim];
        self.drift_into(epsilon, x, &mut s, &mut sc, &mut out);
        Ok(out)
    }

    pub fn drift_into(&self, epsilon: f64, x: &[f64], s: &mut MarginalScratch, score: &mut [f64], out: &mut [f64]) {
        self.fields_into(x, s, score, out);
        let coef = epsilon - self.gamma_gamma_dot;
        for (o, sc) in out.iter_mut().zip(score.iter()) {
            *o += coef * sc;
        }
    }

    /// Mean of the marginal.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    /// Covariance of the marginal, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] +=
                        c.weight * (c.covariance[i * d + j] + (c.mean[i] - mean[i]) * (c.mean[j] - mean[j]));
                }
            }
        }
        cov
    }

    /// `n` exact draws of `x_t`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let d = self.dim;
        let key = StreamKey::new(seed, domain::MIXTURE, self.t.to_bits());
        let mut data = vec![0.0; n * d];
        data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            let mut rng = key.stream(i as u64);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (k, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let c = &self.components[pick];
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            c.factor.mul_lower(&z, out);
            for (o, m) in out.iter_mut().zip(&c.mean) {
                *o += m;
            }
        });
        SampleBatch::new(
            n,
            d,
            data,
            BatchMeta {
                seed,
                t: self.t,
                ..Default::default()
            },
        )
    }
}

/// Free-function form of [`TimeMarginal::log_density`].
pub fn log_density(tm: &TimeMarginal, x: &[f64]) -> Result<f64> {
    tm.log_density(x)
}

/// Free-function form of [`TimeMarginal::score`].
pub fn score(tm: &TimeMarginal, x: &[f64]) -> Result<Vec<f64>> {
    tm.score(x)
}

/// `E[x1 − x0 | x_t = x]` under the independent coupling.
pub fn velocity(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    gamma: GammaFamily,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    time_marginal(rho0, rho1, gamma, t)?.velocity(x)
}

/// `b_F(t, x)` under the independent coupling.
pub fn drift(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    config: &InterpolantConfig,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    time_marginal(rho0, rho1, config.gamma, t)?.drift(config.epsilon, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BRIDGE2: GammaFamily = GammaFamily::BridgeScale { a: 2.0 };

    fn n(mean: f64, var: f64) -> GaussianMixture {
        GaussianMixture::gaussian(vec![mean], vec![var]).unwrap()
    }

    fn two_component() -> GaussianMixture {
        GaussianMixture::isotropic(vec![0.3, 0.7], vec![vec![-1.5], vec![2.0]], 0.4).unwrap()
    }

    fn three_component() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![-3.0], vec![0.5], vec![4.0]],
            vec![vec![0.3], vec![1.0], vec![0.2]],
        )
        .unwrap()
    }

    #[test]
    fn single_pair_variances_add() {
        let tm = time_marginal(&n(0.0, 1.0), &n(4.0, 1.0), BRIDGE2, 0.5).unwrap();
        assert_eq!(tm.components().len(), 1);
        assert!((tm.mean()[0] - 2.0).abs() < 1e-15);
        assert!((tm.covariance()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn at_zero_the_marginal_is_rho0_replicated() {
        let rho0 = two_component();
        let rho1 = three_component();
        let tm = time_marginal(&rho0, &rho1, BRIDGE2, 0.0).unwrap();
        assert_eq!(tm.components().len(), 6);
        for (k, c) in tm.components().iter().enumerate() {
            let (i, j) = (k / 3, k % 3);
            assert_eq!(c.weight, rho0.weights()[i] * rho1.weights()[j]);
            assert_eq!(c.mean, rho0.means()[i]);
            assert_eq!(c.covariance, rho0.covariance_of(i));
        }
    }

    #[test]
    fn degenerate_endpoint_errors() {
        let p = GaussianMixture::point_mass(vec![0.0]).unwrap();
        assert!(matches!(time_marginal(&p, &p, BRIDGE2, 0.0), Err(Error::Degenerate(_))));
        assert!(time_marginal(&p, &p, BRIDGE2, 0.5).is_ok());
    }

    #[test]
    fn log_density_examples() {
        let tm = time_marginal(&n(0.0, 1.0), &n(0.0, 1.0), BRIDGE2, 0.0).unwrap();
        let v = tm.log_density(&[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!(matches!(tm.log_density(&[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn log_density_is_translation_equivariant() {
        let shift = [3.7, -1.2];
        let make = |s: [f64; 2]| {
            GaussianMixture::new(
                vec![0.4, 0.6],
                vec![vec![s[0], s[1]], vec![1.0 + s[0], -2.0 + s[1]]],
                vec![vec![1.0, 0.3, 0.3, 0.5], vec![0.7, 0.0, 0.0, 0.7]],
            )
            .unwrap()
        };
        let base = time_marginal(&make([0.0, 0.0]), &make([0.0, 0.0]), BRIDGE2, 0.3).unwrap();
        let moved = time_marginal(&make(shift), &make(shift), BRIDGE2, 0.3).unwrap();
        let x = [0.4, 0.9];
        let y = [x[0] + shift[0], x[1] + shift[1]];
        let (a, b) = (base.log_density(&x).unwrap(), moved.log_density(&y).unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn far_tail_is_finite_and_dominated() {
        let rho = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![0.0, 0.0], vec![3.0, 0.0]], 1.0).unwrap();
        let tm = time_marginal(&rho, &rho, BRIDGE2, 0.0).unwrap();
        let x = [50.0, 0.0];
        let v = tm.log_density(&x).unwrap();
        assert!(v.is_finite());
        // The pair components at mean (3, 0) dominate; their total weight is 0.5.
        let dominant = 0.5f64.ln() - (2.0 * PI).ln() - 0.5 * 47.0 * 47.0;
        assert!((v - dominant).abs() < 1e-9, "{v} vs {dominant}");
    }

    #[test]
    fn score_examples() {
        let tm = time_marginal(&n(0.0, 1.0), &n(0.0, 1.0), BRIDGE2, 0.0).unwrap();
        assert!((tm.score(&[1.7]).unwrap()[0] + 1.7).abs() < 1e-15);

        let sym = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], 0.5).unwrap();
        let tm = time_marginal(&sym, &sym, BRIDGE2, 0.0).unwrap();
        assert!(tm.score(&[0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn score_matches_finite_difference_at_one() {
        let tm = time_marginal(&two_component(), &three_component(), BRIDGE2, 0.35).unwrap();
        let h = 1e-5;
        let fd = (tm.log_density(&[1.0 + h]).unwrap() - tm.log_density(&[1.0 - h]).unwrap()) / (2.0 * h);
        let s = tm.score(&[1.0]).unwrap()[0];
        assert!((fd - s).abs() / s.abs() < 1e-5, "{fd} vs {s}");
    }

    #[test]
    fn responsibilities_form_a_distribution() {
        let tm = time_marginal(&two_component(), &three_component(), BRIDGE2, 0.6).unwrap();
        for x in [-40.0, -2.0, 0.0, 1.3, 7.0, 90.0] {
            let r = tm.responsibilities(&[x]).unwrap();
            assert!(r.iter().all(|v| *v >= 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_examples() {
        let std = n(0.0, 1.0);
        let tm = time_marginal(&std, &std, BRIDGE2, 0.5).unwrap();
        for x in [-3.0, 0.0, 0.4, 2.0] {
            assert!(tm.velocity(&[x]).unwrap()[0].abs() < 1e-15);
        }
        let c = 2.5;
        let v = velocity(&n(0.0, 1e-12), &n(c, 1e-12), BRIDGE2, 0.3, &[0.9]).unwrap();
        assert!((v[0] - c).abs() < 1e-9);
    }

    #[test]
    fn drift_examples() {
        let std = n(0.0, 1.0);
        let cfg = InterpolantConfig::new(BRIDGE2, 1.0, 0.001, 0.999, 1).unwrap();
        for x in [-2.0, 0.3, 1.1] {
            let b = drift(&std, &std, &cfg, 0.5, &[x]).unwrap();
            assert!((b[0] + x).abs() < 1e-14);
        }
        let cfg0 = InterpolantConfig { epsilon: 0.0, ..cfg };
        let b = drift(&two_component(), &three_component(), &cfg0, 0.5, &[0.7]).unwrap();
        let v = velocity(&two_component(), &three_component(), BRIDGE2, 0.5, &[0.7]).unwrap();
        assert_eq!(b, v);
    }

    #[test]
    fn drift_is_velocity_plus_scaled_score() {
        let cfg = InterpolantConfig::new(BRIDGE2, 0.7, 0.001, 0.999, 1).unwrap();
        for t in [0.05, 0.2, 0.5, 0.8, 0.97] {
            let tm = time_marginal(&two_component(), &three_component(), BRIDGE2, t).unwrap();
            let gg = BRIDGE2.eval(t).unwrap().gamma_gamma_dot();
            for x in [-2.0, 0.1, 3.3] {
                let b = tm.drift(cfg.epsilon, &[x]).unwrap()[0];
                let v = tm.velocity(&[x]).unwrap()[0];
                let s = tm.score(&[x]).unwrap()[0];
                assert!((b - (v + (cfg.epsilon - gg) * s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_mean_is_linear_in_t() {
        let rho0 = two_component();
        let rho1 = three_component();
        for t in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let tm = time_marginal(&rho0, &rho1, BRIDGE2, t).unwrap();
            let expect = (1.0 - t) * rho0.mean()[0] + t * rho1.mean()[0];
            assert!((tm.mean()[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn matched_coupling_keeps_diagonal_pairs() {
        let rho0 = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![0.0], vec![5.0]], 0.1).unwrap();
        let rho1 = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![1.0], vec![7.0]], 0.1).unwrap();
        let c = Coupling::matched(rho0, rho1).unwrap();
        let tm = TimeMarginal::for_coupling(&c, BRIDGE2, 0.5).unwrap();
        assert_eq!(tm.components().len(), 2);
        assert_eq!(tm.components()[1].mean, vec![6.0]);
        // Far from the other component, the velocity is that pair's displacement.
        assert!((tm.velocity(&[6.0]).unwrap()[0] - 2.0).abs() < 1e-9);
    }
}
