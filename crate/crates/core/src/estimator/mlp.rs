//! Fully connected ReLU network with hand-written back-propagation.
//!
//! Parameters live in one flat vector: for each layer the weight matrix
//! (`out × in`, row-major) followed by the bias (`out`). Read column-major,
//! the weight block is `Wᵀ`, which is what the batch products below use.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{domain, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer, input included.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().unwrap()
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// He-normal weights, zero biases; the output layer uses variance `1/in`.
    pub fn new(widths: Vec<usize>, seed: u64) -> Result<Self> {
        check_widths(&widths)?;
        let mut rng = stream(seed, domain::INIT_WEIGHTS, 0, 0);
        let mut params = Vec::with_capacity(param_count(&widths));
        let layers = widths.len() - 1;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if l + 1 == layers { 1.0 } else { 2.0 };
            let std = (gain / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                params.push(std * z);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { widths, params })
    }

    pub fn from_params(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        check_widths(&widths)?;
        let expected = param_count(&widths);
        if params.len() != expected {
            return Err(Error::Shape {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let here = offset;
            offset += w[0] * w[1] + w[1];
            (here, w[0], w[1])
        })
    }

    fn apply_layer(&self, input: &DMatrix<f64>, offset: usize, fan_in: usize, fan_out: usize, relu: bool) -> DMatrix<f64> {
        let wt = DMatrixView::from_slice(&self.params[offset..offset + fan_in * fan_out], fan_in, fan_out);
        let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        let mut h = input * wt;
        for (j, mut col) in h.column_iter_mut().enumerate() {
            let b = bias[j];
            for v in col.iter_mut() {
                *v += b;
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h
    }

    /// Forward pass over an `n × in` batch.
    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let layers = self.widths.len() - 1;
        let mut h = input.clone();
        for (l, (offset, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            h = self.apply_layer(&h, offset, fan_in, fan_out, l + 1 < layers);
        }
        h
    }

    /// Forward pass keeping what back-propagation needs.
    pub fn forward_cached(&self, input: DMatrix<f64>) -> ForwardCache {
        let layers = self.widths.len() - 1;
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(input);
        for (l, (offset, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let h = self.apply_layer(activations.last().unwrap(), offset, fan_in, fan_out, l + 1 < layers);
            activations.push(h);
        }
        ForwardCache { activations }
    }

    /// Gradient of a scalar loss with respect to all parameters, given
    /// `∂loss/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: DMatrix<f64>) -> Vec<f64> {
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut grads = vec![0.0; self.params.len()];
        let mut g = grad_output;
        for (l, &(offset, fan_in, fan_out)) in offsets.iter().enumerate().rev() {
            let input = &cache.activations[l];
            let dwt = input.tr_mul(&g);
            grads[offset..offset + fan_in * fan_out].copy_from_slice(dwt.as_slice());
            for (j, col) in g.column_iter().enumerate() {
                grads[offset + fan_in * fan_out + j] = col.sum();
            }
            if l > 0 {
                let wt = DMatrixView::from_slice(&self.params[offset..offset + fan_in * fan_out], fan_in, fan_out);
                let mut prev = &g * wt.transpose();
                prev.zip_apply(input, |p, a| {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                });
                g = prev;
            }
        }
        grads
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Config(format!("invalid layer widths {widths:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_widths() {
        let net = Mlp::new(vec![3, 256, 256, 256, 4], 0).unwrap();
        assert_eq!(net.n_params(), 3 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 4 + 4);
        assert!(Mlp::from_params(vec![2, 2], vec![0.0; 5]).is_err());
        assert!(Mlp::new(vec![2], 0).is_err());
    }

    #[test]
    fn forward_matches_manual_evaluation() {
        // One hidden unit: h = relu(w·x + b), y = v h + c.
        let net = Mlp::from_params(vec![2, 1, 1], vec![1.0, -2.0, 0.5, 3.0, -1.0]).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = net.forward(&x);
        assert_eq!(y[(0, 0)], 3.0 * 1.5 - 1.0);
        assert_eq!(y[(1, 0)], -1.0);
        assert!(net.forward(&x).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(vec![3, 5, 4, 2], 9).unwrap();
        let x = DMatrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let target = DMatrix::from_fn(6, 2, |i, j| ((i + 2 * j) as f64 * 0.11).cos());
        let loss = |n: &Mlp| 0.5 * (n.forward(&x) - &target).norm_squared();
        let cache = net.forward_cached(x.clone());
        let grads = net.backward(&cache, cache.output() - &target);
        let h = 1e-6;
        for p in 0..net.n_params() {
            let mut plus = net.clone();
            plus.params_mut()[p] += h;
            let mut minus = net.clone();
            minus.params_mut()[p] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - grads[p]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {p}: {fd} vs {}", grads[p]);
        }
    }
}
