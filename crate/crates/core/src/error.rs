use std::path::PathBuf;

use muvae_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("config: {0}")]
    Config(String),

    #[error("contract: {0}")]
    Contract(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Short machine-readable class used in CLI error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Autodiff(AutodiffError::Dimension { .. }) => "dimension",
            Error::Autodiff(AutodiffError::NonFinite { .. }) => "non_finite",
            Error::Autodiff(AutodiffError::Contract(_)) => "contract",
            Error::Diverged { .. } => "diverged",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
