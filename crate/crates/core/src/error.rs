use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shape, axis, kernel size or other caller-side argument.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    /// The function handed to the finite-difference oracle returned NaN/Inf.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
