use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis disagreement between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value (grids, patch sizes, schedules, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid scalar parameter (beta params, class index, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Dataset-level problem (missing files, mixed dimensions, overlap).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Learning-rate schedule queried outside its domain.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// API contract violation (non-scalar backward root, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
