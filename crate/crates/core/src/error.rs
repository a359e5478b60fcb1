use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A size or search guard was exceeded before doing any work.
    #[error("guard exceeded: {0}")]
    Guard(String),

    /// An iteration or retry budget ran out during the computation.
    #[error("budget exhausted: {0}")]
    Budget(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for guard and budget failures (CLI exit code 2).
    pub fn is_resource_limit(&self) -> bool {
        matches!(self, Error::Guard(_) | Error::Budget(_))
    }
}
