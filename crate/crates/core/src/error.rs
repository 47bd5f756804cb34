use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("set is unbounded: {0}")]
    Unbounded(String),
    #[error("invalid set: {0}")]
    InvalidSet(String),
    #[error("integration diverged: {0}")]
    Divergence(String),
    #[error("riccati solver failed: {0}")]
    Dare(String),
    #[error("rpi computation failed: {0}")]
    Rpi(String),
    #[error("initialization step {step} failed: {msg}")]
    Init { step: u8, msg: String },
    #[error("optimization failed: {0}")]
    Solver(String),
    #[error("guarantee violated: {0}")]
    Violation(String),
    #[error("input outside the admissible set: {0}")]
    InputViolation(String),
    #[error("message bus: {0}")]
    Bus(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            found,
        })
    }
}
