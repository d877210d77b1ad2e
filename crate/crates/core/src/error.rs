use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: need {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("tensor `{name}`: manifest shape {manifest:?} disagrees with model shape {model:?}")]
    Shape {
        name: String,
        manifest: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("checkpoint has no model spec")]
    NoSpec,
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// Crate-wide error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("ingestion error at row {row}: {detail}")]
    Ingestion { row: usize, detail: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("split error: class `{class}` has {count} sample(s), at least 2 are needed")]
    Split { class: String, count: usize },
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("training failed at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Tensor(TensorError::Config(_)) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
