use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label id {0} is not in the class catalog")]
    UnknownLabel(u8),

    #[error("invalid class catalog: {0}")]
    Catalog(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("text encoder produced a degenerate vector for {0:?}")]
    DegenerateText(String),

    #[error("non-finite activations in {stage} (block {block})")]
    NonFinite { stage: &'static str, block: usize },

    #[error("parameter `{0}` carries no FROZEN/TRAINABLE tag")]
    Untagged(String),

    #[error("ground truth has no positive pixels; average precision is undefined")]
    NoPositives,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("latitude {0} is outside the web-mercator range")]
    LatitudeOutOfRange(f64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("{skipped} dataset entries failed to load (budget {budget}); last error: {last}")]
    DataBudget {
        skipped: usize,
        budget: usize,
        last: String,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::File { source, .. } => source.category(),
            Error::UnknownLabel(_) | Error::Catalog(_) | Error::Shape(_) => "data",
            Error::InvalidArgument(_) | Error::ConfigMismatch(_) => "config",
            Error::PointOutOfBounds { .. } | Error::DegenerateText(_) => "prompt",
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => "numeric",
            Error::Untagged(_) | Error::Checkpoint(_) => "model",
            Error::NoPositives | Error::Empty(_) => "metric",
            Error::LatitudeOutOfRange(_) => "geo",
            Error::DataBudget { .. } | Error::Dataset(_) => "data",
            Error::Png(_) | Error::Io(_) | Error::Json(_) => "io",
        }
    }

    pub(crate) fn at(path: impl Into<PathBuf>, source: Error) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(source),
        }
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}
