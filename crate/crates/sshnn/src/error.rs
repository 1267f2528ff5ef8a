use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps variants to exit codes: anything user-facing (bad shapes,
/// bad configuration, bad input data, I/O) exits 1, internal invariant
/// violations exit 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A structural hyperparameter is inconsistent; raised at build time.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (labels out of range, empty batches, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Violated internal invariant; indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for input/validation problems,
    /// 2 for internal errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
