use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain label {label} is out of range for {domains} domains")]
    InvalidLabel { label: usize, domains: usize },

    #[error("time step {t} is outside [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("unsupported schedule profile '{0}' (expected 'linear' or 'cosine')")]
    UnsupportedProfile(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite values encountered: {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidLabel { .. } => "invalid_label",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::UnsupportedProfile(_) => "unsupported_profile",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonFinite(_) => "non_finite",
            Error::NotPositiveDefinite(_) => "not_spd",
            Error::Refused(_) => "refused",
            Error::Format(_) => "format",
            Error::Empty(_) => "empty_input",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
