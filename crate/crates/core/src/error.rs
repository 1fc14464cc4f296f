use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is well-formed but cannot be processed, e.g. a constant row
    /// handed to layer normalization.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty support: row {row} has no unmasked entries")]
    EmptySupport { row: usize },

    /// NaN or infinite values showed up during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for this error: 2 for contract violations and bad
    /// inputs, 3 for numeric failures. Exit code 1 (usage) is reserved for the
    /// argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
