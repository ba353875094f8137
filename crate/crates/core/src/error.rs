use thiserror::Error;

pub type Result<T> = std::result::Result<T, NbmixError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NbmixError {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical degeneracy for gene {gene}: {reason}")]
    Degenerate { gene: String, reason: String },

    #[error("condition {condition} has {n} replicate(s); bias correction needs at least 2")]
    InsufficientReplicates { condition: usize, n: usize },

    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl NbmixError {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            NbmixError::Domain(_) => "domain",
            NbmixError::Shape(_) => "shape",
            NbmixError::Degenerate { .. } => "degenerate",
            NbmixError::InsufficientReplicates { .. } => "insufficient_replicates",
            NbmixError::UnsupportedDesign(_) => "unsupported_design",
            NbmixError::InvalidConfig(_) => "invalid_config",
        }
    }
}
