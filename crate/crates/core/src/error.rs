use crate::problem::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the region where the problem is defined.
    #[error("{what} is outside its domain: {detail}")]
    Domain { what: String, detail: String },

    #[error("non-finite input: {what}")]
    NonFinite { what: String },

    /// Explicit step larger than the stability bound.
    #[error("sub-step {dtau_sub:e} exceeds the stability bound {bound:e}")]
    Stability { dtau_sub: f64, bound: f64 },

    /// Non-finite value produced by the backward sweep.
    #[error("non-finite value at slice {slice}, grid point {point}")]
    Divergence { slice: usize, point: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),

    #[error("policy evaluation failed at step {step}: {source}")]
    Policy {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Domain {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
