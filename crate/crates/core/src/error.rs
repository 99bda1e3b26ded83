use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the restoration stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("time {t} outside the valid range [{lo}, {hi}]")]
    TimeRange { t: f64, lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate SDE configuration: {0}")]
    Degenerate(String),

    #[error("quadrature did not converge on [{a}, {b}]: estimated error {error:e} after {intervals} subintervals")]
    Quadrature {
        a: f64,
        b: f64,
        error: f64,
        intervals: usize,
    },

    #[error("sampler diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("ODE step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
