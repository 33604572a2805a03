//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by loading, fitting, inference and evaluation.
///
/// The variants are grouped so that the command-line front end can map them
/// onto exit codes: validation-style problems (bad files, bad configuration,
/// violated preconditions) versus numerical failures inside the recursions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not parse under its declared format.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// Structured content parsed but violated an invariant.
    #[error("validation error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Validation { row: Option<usize>, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("rank-deficient least-squares system: {0}")]
    RankDeficient(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A probability recursion collapsed (all weights zero, NaN likelihoods).
    #[error("numerical degeneracy at t = {t}: {message}")]
    Numerical { t: usize, message: String },

    #[error("decoding failed: {0}")]
    Decoding(String),

    #[error("heart-rate estimation failed: {0}")]
    Estimation(String),

    #[error("infeasible duration model: {0}")]
    InfeasibleDuration(String),

    #[error("training diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("too short: {0}")]
    TooShort(String),

    #[error("unclassifiable: {0}")]
    Unclassifiable(String),

    #[error("missing input: {0}")]
    Missing(String),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn validation(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Validation {
            row,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in a numerical recursion rather than
    /// in the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::Decoding(_)
                | Error::Divergence { .. }
                | Error::RankDeficient(_)
                | Error::Estimation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
