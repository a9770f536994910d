//! Optimization, schedules, checkpoints and the training loop.

mod adam;
mod checkpoint;
mod schedule;
mod trainer;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{checkpoint_path, latest_checkpoint, list_checkpoints, prune_checkpoints, Checkpoint, MAGIC};
pub use schedule::{Schedule, ScheduleSpec, ScheduleValues};
pub use trainer::{match_cosine, StepRecord, TrainConfig, TrainLog, Trainer};

use crate::corpus::CorpusError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in {param} at element {index}; update skipped")]
    NonFiniteGradient { param: String, index: usize },
    #[error("non-finite loss at step {step}, first produced by {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
