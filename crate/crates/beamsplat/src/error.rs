use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A geometric configuration too degenerate to solve (e.g. collinear
    /// correspondences handed to the rigid aligner).
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// A text input failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary container had the wrong magic, version, or layout.
    #[error("format error: {0}")]
    Format(String),

    /// The training loop tripped its divergence guard.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI: 2 for validation failures, 3 for a
    /// divergence abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged(_) => 3,
            _ => 2,
        }
    }
}
