use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller input: dimension mismatch, empty text, out-of-order turn.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Network-level failure. `retryable` is set for connection errors and 5xx.
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },

    /// An agent produced output that could not be parsed into the expected grammar.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn transport(msg: impl Into<String>, retryable: bool) -> Self {
        Error::Transport {
            message: msg.into(),
            retryable,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { retryable: true, .. })
    }

    /// True for failures that originate in the activation backend or the network.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Transport { .. } | Error::NotFound(_) | Error::InsufficientData(_)
        )
    }
}
