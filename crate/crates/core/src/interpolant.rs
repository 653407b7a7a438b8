//! Latent scale families, the linear interpolant, couplings, and exact
//! sampling of `x_t = (1 − t) x0 + t x1 + γ(t) z`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{BatchMeta, SampleBatch};
use crate::error::{check_dim, Error, Result};
use crate::gmm::GaussianMixture;
use crate::rng::{domain, StreamKey};

/// Scale function of the Gaussian latent, vanishing at both endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaFamily {
    /// `γ(t) = √(a t (1 − t))`.
    BridgeScale { a: f64 },
    /// `γ²(t) = (1 − t)² t`.
    AsymmetricScale,
}

/// `γ(t)` together with `d(γ²)/dt`.
///
/// `γ̇` itself diverges at the endpoints and is deliberately not exposed;
/// callers use `γ γ̇ = ½ d(γ²)/dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaValue {
    pub gamma: f64,
    pub gamma_sq_dot: f64,
}

impl GammaValue {
    /// `γ γ̇`.
    pub fn gamma_gamma_dot(&self) -> f64 {
        0.5 * self.gamma_sq_dot
    }
}

impl GammaFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GammaFamily::BridgeScale { a } if !(a.is_finite() && a > 0.0) => {
                Err(Error::Config(format!("bridge scale parameter a must be positive, got {a}")))
            }
            _ => Ok(()),
        }
    }

    pub fn gamma_sq(&self, t: f64) -> f64 {
        match *self {
            GammaFamily::BridgeScale { a } => a * t * (1.0 - t),
            GammaFamily::AsymmetricScale => (1.0 - t) * (1.0 - t) * t,
        }
    }

    pub fn gamma_sq_dot(&self, t: f64) -> f64 {
        match *self {
            GammaFamily::BridgeScale { a } => a * (1.0 - 2.0 * t),
            GammaFamily::AsymmetricScale => (1.0 - t) * (1.0 - 3.0 * t),
        }
    }

    pub fn gamma(&self, t: f64) -> f64 {
        self.gamma_sq(t).max(0.0).sqrt()
    }

    /// Evaluates the family at `t ∈ [0, 1]`.
    pub fn eval(&self, t: f64) -> Result<GammaValue> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
        }
        Ok(GammaValue {
            gamma: self.gamma(t),
            gamma_sq_dot: self.gamma_sq_dot(t),
        })
    }

    pub fn label(&self) -> String {
        match self {
            GammaFamily::BridgeScale { a } => format!("bridge(a={a})"),
            GammaFamily::AsymmetricScale => "asymmetric".into(),
        }
    }
}

/// Free-function form of [`GammaFamily::eval`].
pub fn gamma_eval(gamma: GammaFamily, t: f64) -> Result<GammaValue> {
    gamma.eval(t)
}

/// Parameters of the interpolant process and its simulation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolantConfig {
    pub gamma: GammaFamily,
    /// Constant diffusion level ε ≥ 0.
    pub epsilon: f64,
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_tn")]
    pub tn: f64,
    pub dim: usize,
}

fn default_t0() -> f64 {
    0.001
}

fn default_tn() -> f64 {
    0.999
}

impl InterpolantConfig {
    pub fn new(gamma: GammaFamily, epsilon: f64, t0: f64, tn: f64, dim: usize) -> Result<Self> {
        let cfg = Self {
            gamma,
            epsilon,
            t0,
            tn,
            dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gamma.validate()?;
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(0.0 < self.t0 && self.t0 < self.tn && self.tn < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < t0 < tN < 1, got t0 = {}, tN = {}",
                self.t0, self.tn
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Linear interpolant `(1 − t) x0 + t x1`.
pub fn interpolate(t: f64, x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), x1.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
    }
    let mut out = vec![0.0; x0.len()];
    interpolate_into(t, x0, x1, &mut out);
    Ok(out)
}

pub(crate) fn interpolate_into(t: f64, x0: &[f64], x1: &[f64], out: &mut [f64]) {
    if t == 0.0 {
        out.copy_from_slice(x0);
    } else if t == 1.0 {
        out.copy_from_slice(x1);
    } else {
        for ((o, a), b) in out.iter_mut().zip(x0).zip(x1) {
            *o = (1.0 - t) * a + t * b;
        }
    }
}

/// `∂_t I = x1 − x0`, constant in `t`.
pub fn d_interpolate_dt(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), x1.len())?;
    Ok(x1.iter().zip(x0).map(|(b, a)| b - a).collect())
}

/// Joint law of the endpoint pair `(x0, x1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    /// `x0 ~ ρ0` and `x1 ~ ρ1` independently.
    IndependentProduct {
        rho0: GaussianMixture,
        rho1: GaussianMixture,
    },
    /// Component `i` of `ρ0` is paired with component `i` of `ρ1`; within a
    /// pair the endpoints are independent. Both mixtures must have the same
    /// component count and weights.
    MatchedComponents {
        rho0: GaussianMixture,
        rho1: GaussianMixture,
    },
    /// Finite list of pairs, drawn uniformly with replacement.
    PairedEmpirical { pairs: Vec<(Vec<f64>, Vec<f64>)> },
}

impl Coupling {
    pub fn independent(rho0: GaussianMixture, rho1: GaussianMixture) -> Result<Self> {
        let c = Coupling::IndependentProduct { rho0, rho1 };
        c.validate()?;
        Ok(c)
    }

    pub fn matched(rho0: GaussianMixture, rho1: GaussianMixture) -> Result<Self> {
        let c = Coupling::MatchedComponents { rho0, rho1 };
        c.validate()?;
        Ok(c)
    }

    pub fn paired(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let c = Coupling::PairedEmpirical { pairs };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Coupling::IndependentProduct { rho0, rho1 } => check_dim(rho0.dim(), rho1.dim()),
            Coupling::MatchedComponents { rho0, rho1 } => {
                check_dim(rho0.dim(), rho1.dim())?;
                if rho0.n_components() != rho1.n_components() {
                    return Err(Error::Config(format!(
                        "matched coupling needs equal component counts, got {} and {}",
                        rho0.n_components(),
                        rho1.n_components()
                    )));
                }
                let same = rho0
                    .weights()
                    .iter()
                    .zip(rho1.weights())
                    .all(|(a, b)| (a - b).abs() <= 1e-12);
                if !same {
                    return Err(Error::Config("matched coupling needs equal component weights".into()));
                }
                Ok(())
            }
            Coupling::PairedEmpirical { pairs } => {
                let (first0, first1) = pairs
                    .first()
                    .ok_or_else(|| Error::Config("paired coupling has no pairs".into()))?;
                let d = first0.len();
                if d == 0 {
                    return Err(Error::Config("paired coupling has zero-dimensional points".into()));
                }
                check_dim(d, first1.len())?;
                for (a, b) in pairs {
                    check_dim(d, a.len())?;
                    check_dim(d, b.len())?;
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Coupling::IndependentProduct { rho0, .. } | Coupling::MatchedComponents { rho0, .. } => rho0.dim(),
            Coupling::PairedEmpirical { pairs } => pairs.first().map_or(0, |p| p.0.len()),
        }
    }

    /// Draws one `(x0, x1)` pair. `scratch` must hold `dim` values.
    pub(crate) fn draw_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        scratch: &mut [f64],
        x0: &mut [f64],
        x1: &mut [f64],
    ) {
        match self {
            Coupling::IndependentProduct { rho0, rho1 } => {
                rho0.sample_into(rng, scratch, x0);
                rho1.sample_into(rng, scratch, x1);
            }
            Coupling::MatchedComponents { rho0, rho1 } => {
                let c = rho0.pick(rng.random());
                rho0.sample_component_into(c, rng, scratch, x0);
                rho1.sample_component_into(c, rng, scratch, x1);
            }
            Coupling::PairedEmpirical { pairs } => {
                let (a, b) = &pairs[rng.random_range(0..pairs.len())];
                x0.copy_from_slice(a);
                x1.copy_from_slice(b);
            }
        }
    }

    /// `E‖x0 − x1‖^p` estimated from `n` draws.
    pub fn distance_moment(&self, p: i32, n: usize, seed: u64) -> f64 {
        let d = self.dim();
        let key = StreamKey::new(seed, domain::COUPLING, 1);
        let total: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = key.stream(i as u64);
                let mut s = vec![0.0; d];
                let mut a = vec![0.0; d];
                let mut b = vec![0.0; d];
                self.draw_into(&mut rng, &mut s, &mut a, &mut b);
                let sq: f64 = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum();
                sq.sqrt().powi(p)
            })
            .sum();
        total / n as f64
    }
}

/// One draw of the interpolant with its latent ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantTuple {
    pub t: f64,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub z: Vec<f64>,
    pub xt: Vec<f64>,
}

/// Draws the ingredients of sample `index` at time `t` from `rng`.
pub(crate) fn draw_tuple_into<R: Rng + ?Sized>(
    gamma: GammaFamily,
    coupling: &Coupling,
    t: f64,
    rng: &mut R,
    scratch: &mut [f64],
    x0: &mut [f64],
    x1: &mut [f64],
    z: &mut [f64],
    xt: &mut [f64],
) {
    coupling.draw_into(rng, scratch, x0, x1);
    for zi in z.iter_mut() {
        *zi = rng.sample(StandardNormal);
    }
    interpolate_into(t, x0, x1, xt);
    let g = gamma.gamma(t);
    if g > 0.0 {
        for (x, zi) in xt.iter_mut().zip(z.iter()) {
            *x += g * zi;
        }
    }
}

fn check_sampling_args(config: &InterpolantConfig, coupling: &Coupling, t: f64, n: usize) -> Result<()> {
    coupling.validate()?;
    check_dim(config.dim, coupling.dim())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    Ok(())
}

/// `n` independent draws of `x_t`, reproducible from `seed`.
pub fn sample_interpolant(
    config: &InterpolantConfig,
    coupling: &Coupling,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    check_sampling_args(config, coupling, t, n)?;
    let d = config.dim;
    let key = StreamKey::new(seed, domain::INTERPOLANT, t.to_bits());
    let mut data = vec![0.0; n * d];
    data.par_chunks_mut(d).enumerate().for_each(|(i, xt)| {
        let mut rng = key.stream(i as u64);
        let mut buf = vec![0.0; 4 * d];
        let (scratch, rest) = buf.split_at_mut(d);
        let (x0, rest) = rest.split_at_mut(d);
        let (x1, z) = rest.split_at_mut(d);
        draw_tuple_into(config.gamma, coupling, t, &mut rng, scratch, x0, x1, z, xt);
    });
    SampleBatch::new(
        n,
        d,
        data,
        BatchMeta {
            seed,
            t,
            ..Default::default()
        },
    )
}

/// Like [`sample_interpolant`] but keeps `(x0, x1, z)` for every draw.
pub fn sample_interpolant_tuples(
    config: &InterpolantConfig,
    coupling: &Coupling,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<InterpolantTuple>> {
    check_sampling_args(config, coupling, t, n)?;
    let d = config.dim;
    let key = StreamKey::new(seed, domain::INTERPOLANT, t.to_bits());
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = key.stream(i as u64);
            let mut scratch = vec![0.0; d];
            let mut tuple = InterpolantTuple {
                t,
                x0: vec![0.0; d],
                x1: vec![0.0; d],
                z: vec![0.0; d],
                xt: vec![0.0; d],
            };
            draw_tuple_into(
                config.gamma,
                coupling,
                t,
                &mut rng,
                &mut scratch,
                &mut tuple.x0,
                &mut tuple.x1,
                &mut tuple.z,
                &mut tuple.xt,
            );
            tuple
        })
        .collect())
}
