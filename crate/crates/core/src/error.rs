use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel family {0} has no spectral density")]
    UnsupportedFamily(&'static str),

    #[error(
        "matrix not positive definite (failed at jitter ladder step {step}, jitter {jitter:e})"
    )]
    NotPositiveDefinite { step: usize, jitter: f64 },

    #[error("matrix asymmetric beyond tolerance (relative asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("matrix not positive semi-definite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("conjugate gradients did not converge: {iterations} iterations, relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("duplicate conditioning location at index {0} under noise-free conditioning")]
    DuplicateCenter(usize),

    #[error("feature Gram matrix is singular; use a positive noise variance to regularize")]
    SingularFeatureGram,

    #[error("location {0} is not part of the tabulated draw")]
    NotTabulated(usize),

    #[error("{0}")]
    Unsupported(&'static str),

    #[error("serialization failed: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
