use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite gradient for parameter `{name}`; step aborted")]
    NonFiniteGrad { name: String },

    #[error("manifest {path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint dtype {found} does not match requested {expected}")]
    CheckpointDtype { found: String, expected: String },

    #[error("checkpoint tensor `{name}` has shape {found:?} but the embedded spec requires {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (files, specs, manifests,
    /// violated preconditions) rather than runtime failures; CLIs map
    /// these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::Manifest { .. }
                | Error::Contract { .. }
                | Error::CheckpointVersion { .. }
                | Error::CheckpointDtype { .. }
                | Error::CheckpointShape { .. }
                | Error::CorruptCheckpoint(_)
        )
    }
}
