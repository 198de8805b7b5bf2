use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum LabError {
    /// A precondition of an operation was violated (shape, range, ordering).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A sampled covariance could not be factored even after a resample.
    #[error("cholesky factorisation failed: {0}")]
    NotPositiveDefinite(String),

    /// The closed-form identity only holds for plain SGD.
    #[error("{0} requires a pair trained with plain SGD; this pair used momentum")]
    MomentumTrained(&'static str),

    #[error("gradient history holds {held} records but the pair has taken {steps} steps")]
    HistoryTruncated { held: usize, steps: usize },

    #[error("loss undefined: {0}")]
    EmptyMask(&'static str),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("schema mismatch in {path}: column `{column}`")]
    Schema { path: String, column: String },

    #[error("malformed container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> LabError {
    LabError::Contract {
        op,
        detail: detail.into(),
    }
}
