use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("control step {dt_ctrl} s is not a positive multiple of the inner step {dt_sim} s")]
    StepNotMultiple { dt_ctrl: f64, dt_sim: f64 },

    #[error("{electrode} surface concentration {value} outside the open interval (0, {c_max})")]
    SurfaceSaturated {
        electrode: &'static str,
        value: f64,
        c_max: f64,
    },

    #[error("electrolyte boundary concentration {0} is not positive")]
    ElectrolyteDepleted(f64),

    #[error("environment is terminal; call reset before stepping")]
    EpisodeFinished,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("replay buffer holds {available} transitions, batch needs {requested}")]
    InsufficientSamples { available: usize, requested: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
