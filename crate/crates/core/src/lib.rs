//! Pathwise conditioning of Gaussian processes: exact and approximate prior
//! draws, Matheron-style updates that turn them into posterior draws, and
//! distances for checking the result against exact posteriors.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod prior;

pub use error::{Error, Result};
pub use kernels::{Covariance, Kernel, KernelConfig, KernelFamily};
