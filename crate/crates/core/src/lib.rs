//! Gaussian-process emulators and Bayesian calibration of simulator parameters.
//!
//! Emulator families: exact GPs, collapsed sparse GPs with learned inducing
//! points, stochastic variational GPs, their deep-kernel variants, and a
//! PCA-basis multivariate emulator. Inference: multi-start maximum likelihood
//! and NUTS under a box prior, with split R-hat, ESS and HPD summaries.

pub mod cli;
pub mod dataset;
pub mod deep_kernel;
pub mod emulator;
pub mod error;
pub mod exact_gp;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod multivariate;
pub mod optim;
pub mod predictor;
pub mod rng;
pub mod scaler;
pub mod serde_matrix;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
