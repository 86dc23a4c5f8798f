use thiserror::Error;

/// Errors produced by model construction, fitting, prediction and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates its domain (non-positive variance, |rho| >= 1, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// The GLS normal matrix is singular relative to its largest eigenvalue.
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    /// A domain-specific failure (SPD breakdown, empty domain, bad denominator, ...).
    #[error("domain {domain}: {message}")]
    Domain { domain: String, message: String },

    /// A sampled unit's covariates match no registered pattern, or a pattern is unknown.
    #[error("pattern mismatch: {0}")]
    PatternMismatch(String),

    /// Aggregated counts disagree with the sample (N_dt < n_dt, missing domain, ...).
    #[error("count inconsistency: {0}")]
    CountInconsistency(String),

    /// A data file failed to parse; the message carries line numbers.
    #[error("{path}: {message}")]
    Data { path: String, message: String },

    /// A numeric result left the representable range.
    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(id: &str, message: impl Into<String>) -> Self {
        Error::Domain {
            domain: id.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
