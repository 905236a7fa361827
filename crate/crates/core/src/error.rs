//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// configuration problems, data/shape problems, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement, reported with the graph node that failed.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: String,
        detail: String,
    },

    /// A precondition on an operation argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Dataset, channel-metadata, or file-format problem.
    #[error("data error: {0}")]
    Data(String),

    /// Configuration file problem.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure (non-finite values, indefinite matrices, failed checks).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(node: usize, op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node,
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}
