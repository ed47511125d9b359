use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] pathwise_core::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Short stable tag for CSV status columns and CLI error lines.
    pub fn kind(&self) -> &'static str {
        use pathwise_core::Error as E;
        match self {
            BenchError::Config(_) => "config",
            BenchError::Io(_) => "io",
            BenchError::Core(e) => match e {
                E::DimensionMismatch { .. } => "dimension_mismatch",
                E::InvalidArgument(_) => "invalid_argument",
                E::UnsupportedFamily(_) => "unsupported_family",
                E::NotPositiveDefinite { .. } => "not_positive_definite",
                E::Asymmetric(_) => "asymmetric",
                E::NotPsd(_) => "not_psd",
                E::NotConverged { .. } => "not_converged",
                E::DuplicateCenter(_) => "duplicate_center",
                E::SingularFeatureGram => "singular_feature_gram",
                E::NotTabulated(_) => "not_tabulated",
                E::Unsupported(_) => "unsupported",
                E::Serialization(_) => "serialization",
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
