use thiserror::Error;

/// Errors produced by the engine, the offline transform and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, unreachable budgets, bad flags.
    #[error("configuration error: {0}")]
    Config(String),

    /// Sequence or position beyond what the model or rope table covers.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Caller-supplied data that cannot be processed (too short, empty, out of vocabulary).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite values or a failed decomposition.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed container or report file.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
