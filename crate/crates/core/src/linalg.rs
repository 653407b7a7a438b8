//! Small dense helpers over row-major slices.
//!
//! Factorization is delegated to nalgebra; the hot-path triangular solves
//! work on cached row-major lower factors to stay allocation-free.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lower Cholesky factor `L` with `L Lᵀ = A`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
    log_det: f64,
}

impl CholeskyFactor {
    /// Factorizes a symmetric positive-definite row-major matrix.
    pub fn new(dim: usize, matrix: &[f64]) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Shape {
                expected: dim * dim,
                got: matrix.len(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite covariance entry".into()));
        }
        let m = DMatrix::from_row_slice(dim, dim, matrix);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Degenerate("matrix is not positive definite".into()))?;
        let l = chol.l();
        let mut lower = vec![0.0; dim * dim];
        let mut log_det = 0.0;
        for i in 0..dim {
            for j in 0..=i {
                lower[i * dim + j] = l[(i, j)];
            }
            let diag = l[(i, i)];
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::Degenerate("zero pivot in Cholesky factor".into()));
            }
            log_det += 2.0 * diag.ln();
        }
        Ok(Self {
            dim,
            lower,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64], y: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let row = &self.lower[i * d..i * d + i];
            let mut acc = b[i];
            for (lij, yj) in row.iter().zip(&y[..i]) {
                acc -= lij * yj;
            }
            y[i] = acc / self.lower[i * d + i];
        }
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64], x: &mut [f64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut acc = y[i];
            for j in i + 1..d {
                acc -= self.lower[j * d + i] * x[j];
            }
            x[i] = acc / self.lower[i * d + i];
        }
    }

    /// `out = L v`, used to colour standard normal draws.
    pub fn mul_lower(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = self.lower[i * d..i * d + i + 1]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
}

/// `out = M v` for a row-major square matrix.
pub fn mat_vec(dim: usize, m: &[f64], v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(dim) {
        *o = m[i * dim..(i + 1) * dim]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Numerically stable `log Σ exp(v_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
