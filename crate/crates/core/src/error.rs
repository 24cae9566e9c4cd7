use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid scan profile: {0}")]
    InvalidProfile(String),

    #[error("store error: {0}")]
    Store(String),

    #[error("store {path} is missing {} tile(s): {}", missing.len(), missing.join(", "))]
    MissingTiles { path: PathBuf, missing: Vec<String> },

    #[error("tile out of bounds: {0}")]
    OutOfBounds(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
