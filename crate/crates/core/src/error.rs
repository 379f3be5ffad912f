//! Error type shared by all subsystems.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("{op}: dimension mismatch, lhs shape {lhs:?} vs rhs shape {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid quantization parameter (non-positive step, bad bit-width, ...).
    #[error("quantization parameter error: {0}")]
    QuantParam(String),

    /// Operation requested in the wrong quantization stage.
    #[error("stage error: {0}")]
    Stage(String),

    /// A per-sample score could not be computed.
    #[error("scoring error: {0}")]
    Scoring(String),

    /// Malformed or truncated model/tensor/dataset file.
    #[error("format error: {0}")]
    Format(String),

    /// Failure talking to an external generation service.
    #[error("transport error [request {request_id}]: {message}")]
    Transport { request_id: String, message: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
