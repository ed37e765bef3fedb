use thiserror::Error;

/// Errors produced anywhere in the testbed.
///
/// The variants group failures by who is at fault: the caller (`InvalidInput`),
/// a file on disk (`Format`, `Io`), or the algorithm itself (`Divergence`,
/// `RegistrationFailed`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("registration failed: {0}")]
    RegistrationFailed(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for failures of the algorithm rather than of its inputs.
    pub fn is_algorithmic(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::RegistrationFailed(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
