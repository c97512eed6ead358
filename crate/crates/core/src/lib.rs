//! Guided policy search with an expectation-maximization trajectory optimizer
//! for systems whose states are only observed through noise.
//!
//! The pipeline has four stages, each in its own module:
//!
//! * [`sim`]: analytic point-mass environment, running cost, cost observation,
//!   rollouts.
//! * [`dynamics`]: per-step linear-Gaussian dynamics and cost-observation model
//!   fitted under a variational-Bayes GMM prior.
//! * [`trajopt`]: linear-Gaussian controllers optimized by EM, with a Kalman /
//!   RTS E-step, guarded M-step, and the information-matrix covariance update.
//! * [`policy`]: global MLP policy distilled from local controllers by
//!   KL-weighted regression, plus the global covariance and its trace bound.
//!
//! [`harness`] ties them together (pipeline, evaluation, exports, CLI support).

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod policy;
pub mod seed;
pub mod serde_mat;
pub mod sim;
pub mod trajopt;

pub use error::{Error, Result};
