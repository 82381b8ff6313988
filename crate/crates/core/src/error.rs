use thiserror::Error;

/// Errors produced by the training engine and the dataset tooling.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or layouts do not agree (feature width, parameter count, model spec).
    #[error("schema error: {0}")]
    Schema(String),

    /// The caller asked for something the operation does not accept.
    #[error("usage error: {0}")]
    Usage(String),

    /// A byte blob or file could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    /// A blob parsed but carries values that cannot be valid (NaN, Inf).
    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// No update arrived before the round deadline.
    #[error("round {round} failed: {reason}")]
    RoundFailed { round: u32, reason: String },

    #[error("invalid sample: {0}")]
    Validation(String),

    /// Row-addressed CSV ingestion failure. Row 1 is the first data row.
    #[error("row {row}, field `{field}`: {message}")]
    Ingestion {
        row: usize,
        field: String,
        message: String,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
