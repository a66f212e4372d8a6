//! Bayesian multinomial logit classification with Gaussian-process priors over
//! weighted sums of per-modality linear kernels, sampled by (Riemann manifold)
//! Hamiltonian Monte Carlo and Metropolis-within-Gibbs.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod prediction;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
