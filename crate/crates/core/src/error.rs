use std::fmt;

/// Errors raised anywhere in the pipeline.
///
/// Every variant carries a stable numeric code; the command-line front end
/// prints errors as `MMDA-E<code>: <message>`.
#[derive(Debug, thiserror::Error)]
pub enum MmdaError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {key}: {message}")]
    Config { key: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MmdaError {
    pub fn code(&self) -> u32 {
        match self {
            MmdaError::Shape(_) => 1,
            MmdaError::Validation(_) => 2,
            MmdaError::Numeric(_) => 3,
            MmdaError::Format(_) => 4,
            MmdaError::Config { .. } => 5,
            MmdaError::Io { .. } => 6,
        }
    }

    pub fn shape(msg: impl fmt::Display) -> Self {
        MmdaError::Shape(msg.to_string())
    }

    pub fn validation(msg: impl fmt::Display) -> Self {
        MmdaError::Validation(msg.to_string())
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        MmdaError::Numeric(msg.to_string())
    }

    pub fn format(msg: impl fmt::Display) -> Self {
        MmdaError::Format(msg.to_string())
    }

    pub fn config(key: impl Into<String>, message: impl fmt::Display) -> Self {
        MmdaError::Config {
            key: key.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MmdaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MmdaError>;
