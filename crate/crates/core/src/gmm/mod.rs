//! Gaussian-mixture endpoints and their exact interpolant marginals.

mod marginal;
mod mixture;
pub mod monte_carlo;

pub use marginal::{
    drift, log_density, score, time_marginal, velocity, MarginalScratch, PairComponent, TimeMarginal,
};
pub use mixture::GaussianMixture;
pub use monte_carlo::{mc_conditional_expectation, McEstimate};
