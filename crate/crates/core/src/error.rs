use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numerical core and by configuration handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("negative density {value:e} at node {index}; density must be nonnegative")]
    NegativeDensity { index: usize, value: f64 },

    #[error("{field} must be {bound} (got {value})")]
    Invalid {
        field: String,
        bound: String,
        value: String,
    },

    #[error("cannot parse expression `{expr}`: {reason}")]
    Expression { expr: String, reason: String },

    #[error("solution blew up at time step {step}")]
    BlowUp { step: usize },

    #[error("Fokker-Planck scheme violated positivity: min {min:e} at step {step}")]
    Positivity { step: usize, min: f64 },

    #[error("{0}")]
    Admissibility(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, bound: impl Into<String>, value: impl ToString) -> Self {
        Error::Invalid {
            field: field.into(),
            bound: bound.into(),
            value: value.to_string(),
        }
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}
