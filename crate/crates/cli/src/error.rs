use thiserror::Error;

use fedqot_core::Error as CoreError;
use fedqot_wire::WireError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    /// The distributed and centralized accuracies differ by more than the tolerance.
    #[error("parity check failed: {0}")]
    Parity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Parity(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<WireError> for CliError {
    fn from(e: WireError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
