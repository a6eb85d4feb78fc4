//! Crate-wide error type.
//!
//! Configuration errors name the model assumption they violate (A_s1 for the
//! bank-parameter bounds, A_Θ for the policy interval) so a bad scenario file
//! points straight at the offending constraint.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or scenario data.
    #[error("configuration error: {0}")]
    Config(String),

    /// Mismatched vector/matrix dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A control left the policy interval; admissibility is a model
    /// assumption, so this is never silently clamped.
    #[error("admissibility error: {0}")]
    Admissibility(String),

    /// Numerical failure (blow-up, CFL violation, singular system).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn admissibility(msg: impl Into<String>) -> Self {
        Error::Admissibility(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
