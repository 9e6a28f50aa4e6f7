use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("step index {t} out of range {min}..={max}")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("unsupported parameterization: {0}")]
    UnsupportedParameterization(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite {term} (value {value})")]
    NonFinite { term: String, value: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
