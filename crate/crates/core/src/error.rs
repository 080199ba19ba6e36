use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("computation graph contains a cycle at node {0}")]
    Cycle(usize),

    #[error("degenerate 6D rotation input: {0}")]
    DegenerateRotation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestamps of the two pose sequences differ")]
    TimestampMismatch,

    #[error("non-finite {component} loss at iteration {iter}")]
    NonFinite { component: String, iter: usize },

    #[error("empty scene: no canonical point has density above {0}")]
    EmptyScene(f64),

    #[error("unknown part id {0}")]
    UnknownPart(usize),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

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
