//! Error taxonomy shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KanacError {
    /// Inputs violate an operation's domain contract (shapes, id ranges).
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration or plan fails a structural precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file is not a well-formed checkpoint or token store.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values encountered in compute.
    #[error("numeric error{}: {msg}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    Numeric { layer: Option<usize>, msg: String },

    /// Invariant broken inside the library itself; refuse to proceed.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KanacError>;

impl KanacError {
    pub fn domain(msg: impl Into<String>) -> Self {
        KanacError::Domain(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        KanacError::Validation(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        KanacError::Format(msg.into())
    }
    pub fn internal(msg: impl Into<String>) -> Self {
        KanacError::Internal(msg.into())
    }
    pub fn numeric(layer: Option<usize>, msg: impl Into<String>) -> Self {
        KanacError::Numeric { layer, msg: msg.into() }
    }
}
