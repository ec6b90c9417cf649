//! Small decoder-only transformer used for both the generator and the learner.

mod checkpoint;
mod config;
mod data;
mod infer;
mod model;
mod train;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use config::{GenerationConfig, LMConfig, TrainHyper};
pub use data::{learner_dataset_from, lm_dataset_from, response_context, Example, LearnerDataset};
pub use infer::{generate, generate_with, Decoder, ScoredTokens};
pub use model::{param_layout, ForwardVars, LMModel};
pub use train::{nll_loss, train_supervised, train_supervised_until};

pub(crate) use model::{add_flat_grads, flat_grads};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} outside 1..={max}")]
    TooLong { len: usize, max: usize },
    #[error("position {pos} out of range for sequence of length {len}")]
    Position { pos: usize, len: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("checkpoint tensor {tensor}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, LmError>;

#[cfg(test)]
mod tests;
