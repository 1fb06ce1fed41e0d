use std::fmt;

use thiserror::Error;
use tsdm_tensor::TensorError;

/// Which part of the recovery pipeline failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Stage1 => f.write_str("stage 1"),
            Stage::Stage2 => f.write_str("stage 2"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TsdmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite latent at diffusion step {step}")]
    NonFinite { step: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<TsdmError>,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TsdmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TsdmError::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: Stage) -> Self {
        TsdmError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, TsdmError>;
