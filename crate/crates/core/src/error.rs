use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a precondition (empty sets, bad labels, malformed files).
    #[error("data error: {0}")]
    Data(String),

    /// A caller broke an API contract (e.g. a non-scalar loss passed to backward).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}

pub(crate) use {config_err, data_err, dim_err};
