//! Inference-time sense services: WSI labeling, usage statistics, nearest
//! neighbours and embedding export.

mod neighbors;
mod usage;
mod wsi;

pub use neighbors::{read_dead_senses, write_dead_senses, SenseTable};
pub use usage::{sense_usage_stats, usage_from_instances, SenseUsage, DEAD_SHARE};
pub use wsi::{
    argmax, center_crop, focus_sense_distributions, inference_threads, label_instances, label_multi, label_single,
    labels_from, read_wsi_dataset, write_wsi_dataset, Protocol, SenseLabeling, WsiInstance,
};

use crate::corpus::CorpusError;
use crate::model::ModelError;

/// Default multi-protocol threshold.
pub const DEFAULT_P_THRESH: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum SenseError {
    #[error("instance {id} cannot be labeled: {reason}")]
    Unresolvable { id: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
