use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `row` and `column` are 1-based.
    #[error("{path}: row {row}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        row: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("{path}: bad IDX file: {message}")]
    Idx { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row count mismatch: dataset has {expected} rows, {what} has {found}")]
    RowCount {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("perplexity search did not converge for row {row} after {iterations} iterations")]
    PerplexitySearch { row: usize, iterations: usize },

    #[error("non-finite gradient in parameter tensor {tensor}")]
    NonFiniteGradient { tensor: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("tape does not match network: {0}")]
    TapeMismatch(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("corrupt model file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Numerical(_)
            | Error::PerplexitySearch { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
