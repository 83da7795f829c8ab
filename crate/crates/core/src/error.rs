use thiserror::Error;

/// Errors produced by estimation, inference and I/O.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular regression window (condition estimate {condition:e})")]
    SingularWindow { condition: f64 },

    #[error("degenerate partition: {distinct} distinct values for {bins} bins")]
    DegeneratePartition { distinct: usize, bins: usize },

    #[error("grid point beta={beta} is masked in every period")]
    AllMasked { beta: f64 },

    #[error("grid point beta={beta} lies outside the support [{lo}, {hi}]")]
    OutOfRange { beta: f64, lo: f64, hi: f64 },

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no successful replications ({failed} failed)")]
    EmptySuite { failed: usize },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("date alignment error: {0}")]
    Alignment(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularWindow { .. }
                | Error::DegeneratePartition { .. }
                | Error::AllMasked { .. }
                | Error::Degenerate(_)
                | Error::Numerical(_)
                | Error::InsufficientData(_)
                | Error::EmptySuite { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
