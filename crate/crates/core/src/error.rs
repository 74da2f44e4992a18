use std::path::PathBuf;

use thiserror::Error;

use crate::finetune::LossPoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss variable is not attached to this tape")]
    Detached,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid layer selection: {0}")]
    InvalidLayers(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (file corrupt or truncated)")]
    Checksum,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("freeze policy rejected: {0}")]
    Policy(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged { step: usize, curve: Vec<LossPoint> },

    #[error("invalid pruning schedule: {0}")]
    Schedule(String),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("reports are not comparable: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (configs, files, policies)
    /// rather than by a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Parse { .. }
                | Error::Policy(_)
                | Error::Schedule(_)
                | Error::InvalidSpec(_)
                | Error::InvalidLayers(_)
                | Error::Incompatible(_)
                | Error::Data(_)
        )
    }
}
