use thiserror::Error;

/// Broad failure class, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel matrix of {rows}x{cols} exceeds the budget of {budget} entries; evaluate in batches")]
    MemoryBudget {
        rows: usize,
        cols: usize,
        budget: usize,
    },

    #[error("Cholesky factorization failed at row {index}: pivot {pivot:e}")]
    Factorization { index: usize, pivot: f64 },

    #[error("eigensystem estimation failed: {0}")]
    Eigen(String),

    #[error("training diverged at epoch {epoch} (step size {step_size:e}, loss {loss})")]
    Divergence {
        epoch: usize,
        step_size: f64,
        loss: f64,
    },

    #[error("bandwidth search aborted: {0}")]
    SearchAborted(String),

    #[error("subband {index}: {source}")]
    Subband {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid signal: {0}")]
    Signal(String),

    #[error("corrupt model file: {0}")]
    ModelFile(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub fn in_subband(self, index: usize) -> Self {
        Error::Subband {
            index,
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter { .. } | Error::Config(_) => ErrorCategory::Config,
            Error::DimensionMismatch(_) | Error::Signal(_) | Error::Data(_) => ErrorCategory::Data,
            Error::MemoryBudget { .. }
            | Error::Factorization { .. }
            | Error::Eigen(_)
            | Error::Divergence { .. }
            | Error::SearchAborted(_) => ErrorCategory::Numeric,
            Error::Subband { source, .. } => source.category(),
            Error::ModelFile(_) | Error::Wav(_) | Error::Io(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
