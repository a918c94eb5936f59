use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("malformed frame: {0}")]
    Malformed(String),

    #[error("decryption failed")]
    Decryption,

    #[error("phase violation: cannot {action} during {phase}")]
    PhaseViolation {
        action: &'static str,
        phase: &'static str,
    },

    /// A server withheld its share or its answers; the round cannot finish.
    #[error("availability fault: {0}")]
    Availability(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}
