use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload length mismatch: header implies {expected} bytes, file holds {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("unsupported dtype `{0}` (only float32 is supported)")]
    UnsupportedDtype(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("duplicate plot id `{0}`")]
    DuplicatePlot(String),

    #[error("plot `{0}` lies outside the raster extent")]
    PlotOutsideExtent(String),

    #[error("plots `{0}` and `{1}` fall in the same pixel")]
    PlotCollision(String, String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
