//! Grouped Gaussian process (GGP) models for multi-site forecasting.
//!
//! Latent functions of a Gaussian process regression network are partitioned
//! into groups; functions within a group share a separable prior
//! `k(x, x') * k(h, h')` whose covariance over inducing variables is a
//! Kronecker product. Inference is sparse variational with a mixture of
//! Gaussians posterior, optimized with Adam on a Monte Carlo ELBO.

pub mod data;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod kron;
pub mod model;
pub mod optim;
pub mod params;
pub mod predict;
pub mod vi;

pub use error::{Error, Result};
