//! Training-free conditional sampling from diffusion models.
//!
//! The crate couples a sequential Monte Carlo sampler with unbiased Monte
//! Carlo and multilevel Monte Carlo (MLMC) estimators of the marginal
//! likelihood `p(y | x_t)`. The unconditional model is an analytic Gaussian
//! mixture, so every estimator can be checked against exact quantities:
//! the score, forward marginals, the denoising posterior `p(x_0 | x_t)` and
//! class membership probabilities are all closed form.
//!
//! Module map:
//!
//! - [`schedule`]: discrete noise schedule and nested multilevel time grids.
//! - [`gmm`]: the Gaussian-mixture data model.
//! - [`likelihood`]: conditioning functions `p(y | x_0)`.
//! - [`reverse`]: reverse-time kernels, trajectories and coupled pairs.
//! - [`estimators`]: DPS, Gaussian-kernel MC, naive MC and MLMC estimators.
//! - [`smc`]: the particle sampler with schedule-based resampling.
//! - [`experiments`]: scripted studies writing CSV reports.
//! - [`config`]: the run configuration file and its validation.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod gmm;
pub mod likelihood;
pub mod reverse;
pub mod rng;
pub mod schedule;
pub mod smc;
pub mod stats;

pub use error::{Error, Result};
pub use gmm::GmmModel;
pub use likelihood::{Likelihood, Region};
pub use schedule::{DiffusionSchedule, LevelGrid, ReverseVariance};
