use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible with the requested operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition on a scalar argument does not hold.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A run configuration failed validation.
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// Loss (or another tracked quantity) became NaN or infinite.
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    /// The function handed to the gradient checker did not reproduce its own output.
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    /// Feature maps handed to the decoder do not line up with the visual tokens.
    #[error("provenance mismatch: {0}")]
    Provenance(String),

    /// A trace or checkpoint does not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("output directory {0} already exists and is not empty")]
    OutputOccupied(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
