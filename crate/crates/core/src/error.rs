use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SacError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output size would be non-positive ({detail})")]
    EmptyOutput { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unsupported kernel size {0} (only 3 and 5 can be converted)")]
    UnsupportedKernel(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("{path}: malformed file: {message}")]
    Format { path: String, message: String },
}

impl SacError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SacError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        SacError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn format(path: &std::path::Path, message: impl Into<String>) -> Self {
        SacError::Format {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = SacError> = std::result::Result<T, E>;
