use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EndxError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("empty softmax support")]
    EmptySoftmaxSupport,

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("empty input")]
    EmptyInput,

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("incompatible checkpoint version {found} (this build reads version {supported})")]
    IncompatibleVersion { found: u32, supported: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty subset")]
    EmptySubset,

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = EndxError> = std::result::Result<T, E>;

impl EndxError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EndxError::Io { path: path.into(), source }
    }
}
