//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("coordinate {value} outside domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular implicit system: {0}")]
    SingularSystem(String),

    #[error("degenerate state: |sum of components| = {0:e} is below 1e-12")]
    DegenerateState(f64),

    #[error("input encoding mismatch: model uses {model}, problem uses {problem}")]
    ModeMismatch { model: String, problem: String },

    #[error("line search failed after {0} backtracks")]
    LineSearchFailure(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("scenario schema: {0}")]
    Schema(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// Whether the error signals a numerical failure (as opposed to a usage
    /// or configuration problem). The CLI maps numerical failures to a
    /// distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem(_) | Error::DegenerateState(_) | Error::LineSearchFailure(_)
        )
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
