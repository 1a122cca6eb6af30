use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or settings that do not fit the model they are used with.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied value is outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A non-finite value showed up inside a network.
    #[error("numeric fault at layer {layer}: {detail}")]
    NumericFault { layer: usize, detail: String },

    /// A numeric routine failed to produce a usable answer.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training hit a non-finite loss.
    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFiniteLoss { step: u64, snapshot: String },

    /// Dataset export stopped before every identity was written.
    #[error("partial output after identity {last_completed:?}: {source}")]
    PartialOutput {
        last_completed: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    /// A pipeline stage failed.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}

pub(crate) use arg_err;
pub(crate) use config_err;
