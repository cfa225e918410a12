//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FtError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("autodiff error: {0}")]
    Autodiff(String),
    #[error("graph invariant violated: {0}")]
    Graph(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("data error at line {line}: {msg}")]
    DataLine { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FtError>;
