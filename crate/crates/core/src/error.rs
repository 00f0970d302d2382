use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a structural rule (trace record, log, profile key, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A textual input could not be parsed; `line` is 1-based.
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    /// Mathematically undefined request, e.g. dividing by zero units.
    #[error("domain error: {0}")]
    Domain(String),

    /// A 1-D fit whose abscissa has no spread.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// The design matrix does not determine these constants.
    #[error("unidentifiable constants: {}", .0.join(", "))]
    Unidentifiable(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(source_name: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class: 1 validation, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse { .. } => 1,
            Error::Domain(_) | Error::DegenerateFit(_) | Error::Unidentifiable(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}
