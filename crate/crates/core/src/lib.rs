//! Adaptive kernel predictors for feature-learning infinite-width networks.
//!
//! The crate computes two families of data-adaptive kernels: the Bayesian
//! kernel solved from a min-max saddle of the kernel action ([`anbk`]), and
//! the tangent kernel of gradient flow with weight decay solved through mean
//! field dynamics ([`antk`]). Deep linear networks admit exact solutions
//! ([`linearnet`]); lazy-limit baselines and a finite-width trained-network
//! oracle ([`lazy`], [`oracle`]) close the loop for validation.

pub mod anbk;
pub mod antk;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod hyper;
pub mod kernel;
pub mod lazy;
pub mod linalg;
pub mod linearnet;
pub mod manifest;
pub mod oracle;
pub mod runner;
pub mod sampling;
pub mod stats;

pub use dataset::{Dataset, PatchLayout};
pub use error::{AkernError, Result};
pub use hyper::{Activation, Beta, Hyperparams};
pub use kernel::{
    data_gram, kernel_alignment, kernel_ridge_predict, KernelKind, KernelMatrix, PredictorResult,
};
pub use sampling::SamplerConfig;
