use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("note has no unmasked tokens")]
    EmptyNote,

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("degenerate batch: batch norm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training fold contains a single class ({0})")]
    SingleClass(String),

    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("incomplete report: {0}")]
    IncompleteReport(String),

    #[error("missing artifact {path}: {remedy}")]
    MissingArtifact { path: PathBuf, remedy: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } => 3,
            _ => 4,
        }
    }
}
