use thiserror::Error;

/// Unified error type for every fallible operation in this crate.
///
/// Variants map onto process exit codes in the CLI: `Contract` and
/// `Dimension` indicate caller mistakes (bad config, bad arguments),
/// `Format` indicates unreadable or corrupt input files, and `Domain`
/// and `Numerical` indicate failures that arose inside an otherwise
/// well-posed computation (non-finite loss, factorization breakdown,
/// an operand leaving an operation's domain mid-run).
#[derive(Debug, Error)]
pub enum CoreError {
    /// Shapes or sizes of two operands disagree.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    Dimension {
        context: String,
        left: String,
        right: String,
    },

    /// A value is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file or byte stream does not conform to its declared format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A computation produced non-finite values or a factorization failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn dimension(context: impl Into<String>, left: impl Into<String>, right: impl Into<String>) -> Self {
        CoreError::Dimension {
            context: context.into(),
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        CoreError::Format {
            offset,
            message: message.into(),
        }
    }
}
