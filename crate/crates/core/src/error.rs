//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the checkpoint loader, kept distinct so callers can tell
/// a foreign file from a damaged one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFault {
    BadMagic,
    VersionMismatch,
    Truncated,
    LengthMismatch,
    MalformedSpec,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("state error: {0}")]
    State(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("spec error at layer {layer}: {message}")]
    Spec { layer: usize, message: String },

    #[error("unknown preset `{name}`; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("checkpoint error ({fault:?}): {message}")]
    Checkpoint {
        fault: CheckpointFault,
        message: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("count error: class `{class}` needs {needed} samples but has {available} (short by {})", needed - available)]
    Count {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("pair budget exceeded: requested {requested} {kind} pairs but only {possible} are possible")]
    Budget {
        kind: &'static str,
        requested: usize,
        possible: usize,
    },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("saturation error: only {found} distinct triplets found after {attempts} draws (wanted {wanted})")]
    Saturation {
        wanted: usize,
        found: usize,
        attempts: usize,
    },

    #[error("divergence: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("reference error: unknown sample id `{0}`")]
    Reference(String),

    #[error("gallery error: {0}")]
    Gallery(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn checkpoint(fault: CheckpointFault, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            fault,
            message: msg.into(),
        }
    }
}
