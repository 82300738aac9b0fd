use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),

    #[error("discriminator layer {layer} out of range 1..={num_layers}")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("positive queue is empty")]
    EmptyQueue,

    #[error("label {label} is not a valid class (num_classes = {num_classes})")]
    InvalidLabel { label: u8, num_classes: usize },

    #[error("unknown condition {0:?}")]
    UnknownCondition(String),

    #[error("seed ranges overlap: {0}")]
    SeedOverlap(String),

    #[error("non-finite loss component `{component}` = {value}")]
    NonFinite { component: String, value: f64 },

    #[error("training diverged at iteration {iteration}: {source}")]
    Diverged {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("zero-norm vector in cosine distance")]
    ZeroNorm,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
