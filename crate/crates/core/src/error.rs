use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDiverged { iteration: usize, reason: String },

    #[error("energy evaluation failed in stage `{stage}`: {detail}")]
    Energy { stage: &'static str, detail: String },

    #[error(
        "chain stuck after {rejections} consecutive rejections; \
         try a smaller initial step size (tau) or a smaller lambda"
    )]
    StuckChain { rejections: usize },

    #[error("cannot ingest `{item}`: {reason}")]
    Ingestion { item: String, reason: String },

    #[error("refusing to overwrite existing output at {0} (pass the overwrite flag)")]
    OutputExists(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("while enhancing `{id}`: {source}")]
    Image {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
