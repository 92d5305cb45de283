use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation did not hold (shape mismatch, index out
    /// of range, empty input where one is required, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or gradient went non-finite during training or adaptation.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns `Err(Error::Contract(..))` from the enclosing function when the
/// condition is false.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
