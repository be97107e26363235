//! Shared error type for the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter value is outside its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An index (class label, component id) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An API was used against its lifetime or ordering contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Optimizer or model state is inconsistent with the registered parameters.
    #[error("state error: {0}")]
    State(String),

    /// Not enough data to carry out a fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Malformed file contents; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Configuration file problems; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint manifest or payload problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss became non-finite; `component` names which one.
    #[error("non-finite loss in component {component}")]
    NonFinite { component: &'static str },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
