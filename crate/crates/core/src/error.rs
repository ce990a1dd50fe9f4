use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data is malformed (empty grids, out-of-range class ids, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Experiment or architecture configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A configuration file is missing or cannot be parsed.
    #[error("configuration file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("batch-size error: batch normalization needs at least 2 samples, got {0}")]
    BatchSize(usize),

    /// Two parameter sets that must be structurally identical are not.
    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A training step produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration}: {dump}")]
    NonFiniteLoss { iteration: usize, dump: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
