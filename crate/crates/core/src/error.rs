use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed document. `message` carries serde's line/column context.
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Two consecutive layers (or the input and layer 0) do not compose.
    #[error("layers ({from}, {to}) do not compose: {message}")]
    ShapeComposition {
        from: String,
        to: usize,
        message: String,
    },

    #[error("layer {index}: {message}")]
    InvalidLayer { index: usize, message: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("unknown tensor id {0} on tape")]
    UnknownTensor(usize),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Numerical failures (overflow, NaN gradients) as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
