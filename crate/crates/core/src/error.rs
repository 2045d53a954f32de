use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its documented domain (shape
    /// mismatch, asymmetric input, non-finite values, ...).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    Singular { pivot: usize, value: f64 },

    /// A model produced an output outside its class constraint.
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    /// The requested configuration cannot be realized.
    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }
}
