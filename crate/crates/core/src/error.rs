use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A numeric precondition was violated (tiny denominator, fractional
    /// power of a negative base, non-finite output, ...).
    #[error("numeric guard in {op}: {detail}")]
    NumericGuard { op: &'static str, detail: String },

    /// A caller broke an operation's documented contract.
    #[error("contract violated: {0}")]
    Contract(String),

    /// The tape was used in a state that does not allow the request.
    #[error("tape state error: {0}")]
    State(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at task {task}, epoch {epoch}, batch {batch} (value {value})")]
    NonFiniteLoss {
        task: usize,
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn guard(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NumericGuard {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
