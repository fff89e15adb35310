use thiserror::Error;

/// Failures raised by tensor construction, graph recording and optimisation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl AutodiffError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        AutodiffError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
