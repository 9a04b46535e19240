use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("accretivity violation at level {level}: |integral of b| = {integral:.3e} below floor {floor:.3e}")]
    AccretivityViolation { level: i32, integral: f64, floor: f64 },

    #[error("no valid child at ordering step {step}: tail {tail:.3e} below required {required:.3e} (delta overstated)")]
    NoValidChild { step: usize, tail: f64, required: f64 },

    #[error("scale window too small: {0}")]
    WindowTooSmall(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("measurability violated: {0}")]
    Measurability(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { field: field.to_string(), reason: reason.into() }
}
