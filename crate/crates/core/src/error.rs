use std::io;

use durr_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum DurrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("invalid image data: {0}")]
    Image(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("trajectory has no ground-truth PSNR values")]
    MissingGroundTruth,
    #[error("non-finite loss at iteration {iteration}")]
    Diverged {
        iteration: u64,
        /// Parameters from the last evaluation round that completed with finite values.
        last_good: Box<Checkpoint>,
    },
}

impl DurrError {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        DurrError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage error, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            DurrError::InvalidArgument(_) => 1,
            DurrError::Diverged { .. } => 3,
            DurrError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient(_)) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DurrError>;
