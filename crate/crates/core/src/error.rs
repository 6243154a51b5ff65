use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("record {index}: attribute `{attribute}` has value {value} outside its level set")]
    MalformedRecord {
        index: usize,
        attribute: &'static str,
        value: i64,
    },

    #[error("attribute `{attribute}` has unknown level {level} after merging")]
    UnknownLevel { attribute: &'static str, level: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("mode mismatch: {0}")]
    ModeMismatch(&'static str),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("checkpoint parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("layer `{name}` has no spatial activations; valid layers: {}", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NumericFailure { epoch: usize, batch: usize },

    #[error("nothing to plot")]
    NothingToPlot,

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
