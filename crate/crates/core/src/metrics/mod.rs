//! Distribution-error measurements between sample sets.

pub mod kdtree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::error::{check_dim, Error, Result};
use crate::linalg::CholeskyFactor;
use kdtree::{brute_force_kth_sq_dist, KdTree};

/// Above this dimension the tree is skipped in favour of brute force.
pub const TREE_MAX_DIM: usize = 10;

/// Settings for [`knn_kl`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    /// Distances are floored here before taking logs.
    pub floor: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 5, floor: 1e-12 }
    }
}

/// k-NN KL estimate together with a count of floored self-distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    /// Number of `p`-samples whose k-th neighbour distance within `p` was zero.
    pub floored: usize,
}

impl KlEstimate {
    /// True when duplicate points forced distance flooring.
    pub fn flagged(&self) -> bool {
        self.floored > 0
    }
}

fn kth_distances(points: &[f64], dim: usize, queries: &[f64], k: usize, exclude_self: bool) -> Vec<f64> {
    let use_tree = dim <= TREE_MAX_DIM;
    let tree = use_tree.then(|| KdTree::new(points, dim));
    queries
        .par_chunks(dim)
        .enumerate()
        .map(|(i, q)| {
            let exclude = exclude_self.then_some(i);
            let d2 = match &tree {
                Some(t) => t.kth_sq_dist(q, k, exclude),
                None => brute_force_kth_sq_dist(points, dim, q, k, exclude),
            };
            d2.expect("sample counts checked against k").sqrt()
        })
        .collect()
}

/// k-NN estimate of `KL(p ‖ q)` from samples.
///
/// For each `x_i` in `p`, `r_i` is the distance to its k-th neighbour among the
/// other `p`-samples and `s_i` the distance to its k-th neighbour in `q`; the
/// estimate is `(d/n) Σ log(s_i / r_i) + log(m / (n − 1))`.
pub fn knn_kl(p: &SampleBatch, q: &SampleBatch, cfg: &KnnConfig) -> Result<KlEstimate> {
    check_dim(p.dim(), q.dim())?;
    let (n, m, d, k) = (p.len(), q.len(), p.dim(), cfg.k);
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if n <= k || m <= k {
        return Err(Error::Config(format!("need more than k = {k} samples, got n = {n}, m = {m}")));
    }
    if !(cfg.floor > 0.0) {
        return Err(Error::Config("distance floor must be positive".into()));
    }
    let r = kth_distances(p.data(), d, p.data(), k, true);
    let s = kth_distances(q.data(), d, p.data(), k, false);
    let floored = r.iter().filter(|v| **v < cfg.floor).count();
    let sum: f64 = r
        .iter()
        .zip(&s)
        .map(|(ri, si)| (si.max(cfg.floor) / ri.max(cfg.floor)).ln())
        .sum();
    let kl = d as f64 / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln();
    Ok(KlEstimate { kl, floored })
}

/// Closed-form `KL(N(μp, Σp) ‖ N(μq, Σq))` with row-major covariances.
pub fn gaussian_kl(mean_p: &[f64], cov_p: &[f64], mean_q: &[f64], cov_q: &[f64]) -> Result<f64> {
    let d = mean_p.len();
    check_dim(d, mean_q.len())?;
    let lp = CholeskyFactor::new(d, cov_p)?;
    let lq = CholeskyFactor::new(d, cov_q)?;
    // tr(Σq⁻¹ Σp) = ‖Lq⁻¹ Lp‖_F²
    let mut trace = 0.0;
    let mut col = vec![0.0; d];
    let mut solved = vec![0.0; d];
    for j in 0..d {
        for i in 0..d {
            col[i] = lp.lower()[i * d + j];
        }
        lq.solve_lower(&col, &mut solved);
        trace += solved.iter().map(|v| v * v).sum::<f64>();
    }
    let diff: Vec<f64> = mean_q.iter().zip(mean_p).map(|(a, b)| a - b).collect();
    lq.solve_lower(&diff, &mut solved);
    let quad: f64 = solved.iter().map(|v| v * v).sum();
    Ok(0.5 * (trace + quad - d as f64 + lq.log_det() - lp.log_det()))
}

/// Gaps between the first two moments of two batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentGap {
    /// `‖mean(a) − mean(b)‖₂`.
    pub mean_gap: f64,
    /// `‖cov(a) − cov(b)‖_F`.
    pub cov_gap: f64,
}

pub fn moment_distance(a: &SampleBatch, b: &SampleBatch) -> Result<MomentGap> {
    check_dim(a.dim(), b.dim())?;
    let mean_gap = a
        .mean()
        .iter()
        .zip(b.mean())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let cov_gap = a
        .covariance()
        .iter()
        .zip(b.covariance())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(MomentGap { mean_gap, cov_gap })
}
