use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// An input value is outside its documented domain.
    #[error("invalid value: {0}")]
    Validation(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step} on scene {scene_id}: {detail}")]
    Numerical {
        step: usize,
        scene_id: u64,
        detail: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse {
        row: usize,
        column: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
