use std::io;

use thiserror::Error;

/// Failures of the framed protocol and the sessions built on it.
#[derive(Debug, Error)]
pub enum WireError {
    /// Framing violations: bad length, unknown type code, trailing bytes,
    /// a message that is not valid in the current session state.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// A payload whose JSON or parameter blob does not parse.
    #[error("format error: {0}")]
    Format(String),
    /// The peer closed the stream, or it ended inside a frame.
    #[error("connection closed: {0}")]
    Closed(String),
    #[error("rejected by coordinator: {0}")]
    Rejected(String),
    /// An ERROR frame from the peer.
    #[error("peer error {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error("tls: {0}")]
    Tls(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error(transparent)]
    Core(#[from] fedqot_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = WireError> = std::result::Result<T, E>;
