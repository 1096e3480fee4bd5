use thiserror::Error;

/// Errors raised by the pruning engine.
#[derive(Debug, Error)]
pub enum PruneError {
    /// An argument lies outside the operation's domain (empty batch,
    /// out-of-range token, degenerate generator parameters).
    #[error("input domain error: {0}")]
    InputDomain(String),

    /// Matrix or vector dimensions do not compose.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numerical routine failed (non-finite values, failed factorization).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A wire frame or archive could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Client uploads disagree with the server's view of the model.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An experiment specification failed validation.
    #[error("invalid experiment spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PruneError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> PruneError {
    PruneError::Shape(msg.into())
}
