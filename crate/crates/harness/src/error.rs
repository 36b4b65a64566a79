use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config {path}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Config {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),

    #[error("decisions {path}:{line}: {msg}")]
    Decisions {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error(transparent)]
    Core(#[from] mvanet_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    /// Exit code 1 (validation) vs 2 (runtime failure).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Decisions { .. } => true,
            Error::Contract { .. } => true,
            Error::Io(..) => false,
            Error::Core(e) => e.is_validation(),
        }
    }
}
