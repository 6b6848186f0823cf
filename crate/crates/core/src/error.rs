use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call received input outside its domain (bad shape, id out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A binary or text container failed validation.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A dataset entry was malformed.
    #[error("load error in {}: {message}", path.display())]
    Load { path: PathBuf, message: String },

    /// The synthetic generator could not satisfy the requested layout.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training or evaluation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub fn load(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
