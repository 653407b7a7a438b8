use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::{BatchMeta, SampleBatch};
use crate::error::{check_dim, Error, Result};
use crate::linalg::CholeskyFactor;
use crate::rng::{domain, StreamKey};

/// Finite mixture of Gaussians with cached Cholesky factors.
///
/// Component covariances must be symmetric positive definite, except that an
/// all-zero covariance is accepted and denotes a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureJson", into = "MixtureJson")]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
    factors: Vec<Option<CholeskyFactor>>,
}

/// On-disk form: `{weights: [...], means: [[...]], covariances: [[[...]]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureJson {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureJson> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: MixtureJson) -> Result<Self> {
        let covs = raw
            .covariances
            .into_iter()
            .map(|rows| rows.into_iter().flatten().collect())
            .collect();
        GaussianMixture::new(raw.weights, raw.means, covs)
    }
}

impl From<GaussianMixture> for MixtureJson {
    fn from(g: GaussianMixture) -> Self {
        let d = g.dim;
        MixtureJson {
            weights: g.weights,
            means: g.means,
            covariances: g
                .covariances
                .into_iter()
                .map(|c| c.chunks(d).map(<[f64]>::to_vec).collect())
                .collect(),
        }
    }
}

impl GaussianMixture {
    /// `covariances` are row-major `d × d` matrices.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::Config(format!(
                "mixture has {k} weights, {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        let mut factors = Vec::with_capacity(k);
        for (mean, cov) in means.iter().zip(&covariances) {
            check_dim(dim, mean.len())?;
            check_dim(dim * dim, cov.len())?;
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("non-finite mixture mean".into()));
            }
            for i in 0..dim {
                for j in 0..i {
                    let (a, b) = (cov[i * dim + j], cov[j * dim + i]);
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                        return Err(Error::Degenerate("covariance is not symmetric".into()));
                    }
                }
            }
            if cov.iter().all(|v| *v == 0.0) {
                factors.push(None);
            } else {
                factors.push(Some(CholeskyFactor::new(dim, cov)?));
            }
        }
        Ok(Self {
            dim,
            weights,
            means,
            covariances,
            factors,
        })
    }

    /// Mixture whose components all have covariance `variance · I`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let dim = means.first().map(Vec::len).unwrap_or(0);
        let cov = scaled_identity(dim, variance);
        let covs = vec![cov; means.len()];
        Self::new(weights, means, covs)
    }

    pub fn gaussian(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::gaussian(vec![0.0; dim], scaled_identity(dim, 1.0))
    }

    pub fn point_mass(at: Vec<f64>) -> Result<Self> {
        let d = at.len();
        Self::gaussian(at, vec![0.0; d * d])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Row-major covariance of component `i`.
    pub fn covariance_of(&self, i: usize) -> &[f64] {
        &self.covariances[i]
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    /// Mixture mean `Σ w_i μ_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Mixture covariance `Σ w_i (Σ_i + μ_i μ_iᵀ) − μ μᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut c = vec![0.0; d * d];
        for ((w, mu), cov) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += w * (cov[i * d + j] + (mu[i] - mean[i]) * (mu[j] - mean[j]));
                }
            }
        }
        c
    }

    /// Picks a component index from a uniform draw in `[0, 1)`.
    pub(crate) fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Draws a component sample into `out`; `scratch` must hold `dim` values.
    pub(crate) fn sample_component_into<R: Rng + ?Sized>(
        &self,
        component: usize,
        rng: &mut R,
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        match &self.factors[component] {
            Some(f) => {
                for s in scratch.iter_mut() {
                    *s = rng.sample(StandardNormal);
                }
                f.mul_lower(scratch, out);
                for (o, m) in out.iter_mut().zip(&self.means[component]) {
                    *o += m;
                }
            }
            None => out.copy_from_slice(&self.means[component]),
        }
    }

    pub(crate) fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, scratch: &mut [f64], out: &mut [f64]) {
        let u: f64 = rng.random();
        let c = self.pick(u);
        self.sample_component_into(c, rng, scratch, out);
    }

    /// `n` independent draws, reproducible from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        use rayon::prelude::*;
        let d = self.dim;
        let key = StreamKey::new(seed, domain::MIXTURE, 0);
        let mut data = vec![0.0; n * d];
        data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            let mut rng = key.stream(i as u64);
            let mut scratch = vec![0.0; d];
            self.sample_into(&mut rng, &mut scratch, out);
        });
        SampleBatch::new(
            n,
            d,
            data,
            BatchMeta {
                seed,
                ..Default::default()
            },
        )
    }
}

pub(crate) fn scaled_identity(dim: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = scale;
    }
    m
}
