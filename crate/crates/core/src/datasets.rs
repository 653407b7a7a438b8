//! Toy distributions: checkerboard, spiral, vertically stacked blocks, and
//! Gaussian-mixture benchmarks.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{BatchMeta, SampleBatch};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::interpolant::Coupling;
use crate::rng::{domain, StreamKey};

/// Radius of the ring carrying the benchmark mixture means.
pub const BENCHMARK_RADIUS: f64 = 2.0;
/// Per-coordinate variance of every benchmark component.
pub const BENCHMARK_VARIANCE: f64 = 0.01;
/// Noise scale of the spiral arm.
pub const SPIRAL_NOISE: f64 = 0.1;

const BLOCK_ROWS: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];

/// Named toy distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ToyDataset {
    /// Uniform on the 8 dark unit squares of a 4×4 board covering `[−2, 2]²`.
    Checkerboard,
    /// Archimedean arm `r = θ/3`, `θ ~ U[0.5, 3π]`, plus isotropic noise.
    Spiral,
    /// Four unit blocks stacked at `x = 0`; the target of the block pairings.
    BlocksTarget,
    /// Four unit blocks displaced horizontally by ±0.5, alternating by row.
    BlocksA,
    /// Four unit blocks displaced horizontally by ±2.5, alternating by row.
    BlocksB,
    /// Mixture with means on a ring of radius 2 (or spread over `[−2, 2]`
    /// in one dimension) and isotropic variance 0.01.
    GmmBenchmark { d: usize, components: usize },
}

impl ToyDataset {
    pub fn dim(&self) -> usize {
        match *self {
            ToyDataset::GmmBenchmark { d, .. } => d,
            _ => 2,
        }
    }

    /// Number of vertically indexed blocks; 1 for unstructured datasets.
    pub fn block_count(&self) -> usize {
        match self {
            ToyDataset::BlocksTarget | ToyDataset::BlocksA | ToyDataset::BlocksB => BLOCK_ROWS.len(),
            _ => 1,
        }
    }

    fn block_offset(&self) -> Option<f64> {
        match self {
            ToyDataset::BlocksTarget => Some(0.0),
            ToyDataset::BlocksA => Some(0.5),
            ToyDataset::BlocksB => Some(2.5),
            _ => None,
        }
    }

    /// Centre of block `k`.
    pub fn block_center(&self, k: usize) -> Option<[f64; 2]> {
        let offset = self.block_offset()?;
        let sign = if k.is_multiple_of(2) { -1.0 } else { 1.0 };
        BLOCK_ROWS.get(k).map(|&y| [sign * offset, y])
    }

    /// Gaussian stand-in for a block dataset: one component per block with
    /// the block's mean and covariance (`I/12`).
    pub fn block_mixture(&self) -> Result<GaussianMixture> {
        if self.block_offset().is_none() {
            return Err(Error::Config(format!("{self:?} is not a block dataset")));
        }
        let k = self.block_count();
        let means = (0..k).map(|i| self.block_center(i).unwrap().to_vec()).collect();
        GaussianMixture::isotropic(vec![1.0 / k as f64; k], means, 1.0 / 12.0)
    }

    /// Exact mixture for the Gaussian benchmark.
    pub fn mixture(&self) -> Result<GaussianMixture> {
        match *self {
            ToyDataset::GmmBenchmark { d, components } => gmm_benchmark(d, components),
            _ => self.block_mixture(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let ToyDataset::GmmBenchmark { d, components } = *self {
            if d == 0 || components == 0 {
                return Err(Error::Config("benchmark needs positive dimension and component count".into()));
            }
        }
        Ok(())
    }

    /// Draws one point, restricted to block `block` when given.
    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, block: Option<usize>, out: &mut [f64]) {
        match *self {
            ToyDataset::Checkerboard => {
                let cell = rng.random_range(0..8usize);
                let row = cell / 2;
                let col = 2 * (cell % 2) + row % 2;
                out[0] = -2.0 + col as f64 + rng.random::<f64>();
                out[1] = -2.0 + row as f64 + rng.random::<f64>();
            }
            ToyDataset::Spiral => {
                let theta = rng.random_range(0.5..3.0 * PI);
                let p = spiral_point(theta, rng);
                out.copy_from_slice(&p);
            }
            ToyDataset::BlocksTarget | ToyDataset::BlocksA | ToyDataset::BlocksB => {
                let k = block.unwrap_or_else(|| rng.random_range(0..BLOCK_ROWS.len()));
                let c = self.block_center(k).unwrap();
                out[0] = c[0] - 0.5 + rng.random::<f64>();
                out[1] = c[1] - 0.5 + rng.random::<f64>();
            }
            ToyDataset::GmmBenchmark { d, components } => {
                let sd = BENCHMARK_VARIANCE.sqrt();
                let means = benchmark_means(d, components);
                let m = &means[rng.random_range(0..components)];
                for (o, mu) in out.iter_mut().zip(m) {
                    *o = mu + sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
}

fn spiral_point<R: Rng + ?Sized>(theta: f64, rng: &mut R) -> [f64; 2] {
    let r = theta / 3.0;
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    [r * theta.cos() + SPIRAL_NOISE * nx, r * theta.sin() + SPIRAL_NOISE * ny]
}

fn benchmark_means(d: usize, components: usize) -> Vec<Vec<f64>> {
    (0..components)
        .map(|k| {
            let mut m = vec![0.0; d];
            if d == 1 {
                m[0] = if components == 1 {
                    BENCHMARK_RADIUS
                } else {
                    -BENCHMARK_RADIUS + 2.0 * BENCHMARK_RADIUS * k as f64 / (components - 1) as f64
                };
            } else {
                let a = 2.0 * PI * k as f64 / components as f64;
                m[0] = BENCHMARK_RADIUS * a.cos();
                m[1] = BENCHMARK_RADIUS * a.sin();
            }
            m
        })
        .collect()
}

/// Equal-weight benchmark mixture in `d` dimensions.
pub fn gmm_benchmark(d: usize, components: usize) -> Result<GaussianMixture> {
    ToyDataset::GmmBenchmark { d, components }.validate()?;
    GaussianMixture::isotropic(
        vec![1.0 / components as f64; components],
        benchmark_means(d, components),
        BENCHMARK_VARIANCE,
    )
}

/// `n` independent draws from `ds`.
pub fn sample_dataset(ds: ToyDataset, n: usize, seed: u64) -> Result<SampleBatch> {
    ds.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let d = ds.dim();
    let key = StreamKey::new(seed, domain::DATASET, 0);
    let mut data = vec![0.0; n * d];
    data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let mut rng = key.stream(i as u64);
        ds.draw_into(&mut rng, None, out);
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

/// `n` pairs whose members come from blocks with the same vertical index.
///
/// Unstructured datasets count as a single block, so pairing two of them
/// is an independent product.
pub fn paired_coupling(ds0: ToyDataset, ds1: ToyDataset, n: usize, seed: u64) -> Result<Coupling> {
    ds0.validate()?;
    ds1.validate()?;
    if ds0.dim() != ds1.dim() {
        return Err(Error::Shape {
            expected: ds0.dim(),
            got: ds1.dim(),
        });
    }
    if ds0.block_count() != ds1.block_count() {
        return Err(Error::Config(format!(
            "cannot pair {ds0:?} ({} blocks) with {ds1:?} ({} blocks)",
            ds0.block_count(),
            ds1.block_count()
        )));
    }
    if n == 0 {
        return Err(Error::Config("pair count must be at least 1".into()));
    }
    let d = ds0.dim();
    let blocks = ds0.block_count();
    let key = StreamKey::new(seed, domain::COUPLING, 0);
    let pairs = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = key.stream(i as u64);
            let k = (blocks > 1).then(|| rng.random_range(0..blocks));
            let mut x0 = vec![0.0; d];
            let mut x1 = vec![0.0; d];
            ds0.draw_into(&mut rng, k, &mut x0);
            ds1.draw_into(&mut rng, k, &mut x1);
            (x0, x1)
        })
        .collect();
    Coupling::paired(pairs)
}

/// Vertical block index of a point drawn from a block dataset.
pub fn block_index(y: f64) -> usize {
    ((y + 2.0).floor().max(0.0) as usize).min(BLOCK_ROWS.len() - 1)
}
