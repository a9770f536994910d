//! The sense-embedding network and its three-part loss.

mod config;
mod encoder;
mod forward;
mod params;

use rand::Rng;

use crate::corpus::{SenseInventory, Vocabulary};
use crate::numerics::{NumericsError, ParamStore};

pub use config::ModelConfig;
pub use forward::{Disambiguation, Forward, ForwardOptions, ForwardOutputs, LossObjective, LossVars, PROB_FLOOR};
pub use params::{init_params, truncated_normal, EncoderLayout, LayerLayout, Layout};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A model instance: configuration, vocabulary, sense inventory and weights.
#[derive(Clone, Debug)]
pub struct PolyLm {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub inventory: SenseInventory,
    pub params: ParamStore<f32>,
    layout: Layout,
}

impl PolyLm {
    /// Freshly initialized weights.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab: Vocabulary,
        inventory: SenseInventory,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, inventory.total(), rng);
        Self::from_params(config, vocab, inventory, params)
    }

    pub fn from_params(
        config: ModelConfig,
        vocab: Vocabulary,
        inventory: SenseInventory,
        params: ParamStore<f32>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != inventory.num_tokens() {
            return Err(ModelError::Config(format!(
                "vocabulary has {} tokens but the sense inventory covers {}",
                vocab.len(),
                inventory.num_tokens()
            )));
        }
        let layout = Layout::resolve(&params, &config, inventory.total())?;
        Ok(PolyLm { config, vocab, inventory, params, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Sense embedding matrix `[|S| × d]`.
    pub fn sense_embeddings(&self) -> &crate::numerics::Tensor<f32> {
        self.params.get(self.layout.sense_embeddings)
    }
}
