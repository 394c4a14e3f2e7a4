//! Error types shared across the library.

use thiserror::Error;

/// Errors produced by tensor plumbing, kernel construction, convolution,
/// training, and dataset ingestion.
#[derive(Debug, Error)]
pub enum DclsError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward requested but the forward pass kept no cache")]
    MissingCache,

    #[error("invalid convolution spec: {0}")]
    InvalidConvSpec(String),

    #[error("empty output: axis {axis} has input {input}, padding {padding}, kernel {kernel}, stride {stride}")]
    EmptyOutput {
        axis: usize,
        input: usize,
        padding: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DclsError>;
