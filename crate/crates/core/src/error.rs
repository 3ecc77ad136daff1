use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a checkpoint file. Each variant has a stable code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("model config digest mismatch: expected {expected:016x}, found {found:016x}")]
    DigestMismatch { expected: u64, found: u64 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("checkpoint has no entry named {0}")]
    MissingEntry(String),

    #[error("checkpoint entry {name} has dims {found:?}, model expects {expected:?}")]
    EntryShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl CheckpointError {
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic => 1,
            CheckpointError::UnsupportedVersion(_) => 2,
            CheckpointError::ChecksumMismatch { .. } => 3,
            CheckpointError::DigestMismatch { .. } => 4,
            CheckpointError::Malformed(_) => 5,
            CheckpointError::MissingEntry(_) => 6,
            CheckpointError::EntryShape { .. } => 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest digest mismatch: manifest says {expected}, contents hash to {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("mask {} contains label {value} but num_classes is {num_classes}", file.display())]
    LabelOutOfRange {
        file: PathBuf,
        value: u8,
        num_classes: usize,
    },

    #[error("bad manifest: {0}")]
    Manifest(String),

    #[error("cannot decode image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}
