use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub filter_size: usize,
    pub n_heads: usize,
    pub layers_disamb: usize,
    pub layers_predict: usize,
    pub seq_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// 128 wide, 512 filter, 8 heads, 4 + 8 layers.
    pub fn paper_small() -> Self {
        ModelConfig {
            d_model: 128,
            filter_size: 512,
            n_heads: 8,
            layers_disamb: 4,
            layers_predict: 8,
            seq_len: 128,
            dropout: 0.1,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }

    /// 256 wide, 1024 filter, 8 heads, 4 + 12 layers.
    pub fn paper_base() -> Self {
        ModelConfig { d_model: 256, filter_size: 1024, layers_predict: 12, ..Self::paper_small() }
    }

    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            filter_size: 256,
            n_heads: 4,
            layers_disamb: 2,
            layers_predict: 4,
            seq_len: 64,
            ..Self::paper_small()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-small" => Some(Self::paper_small()),
            "paper-base" => Some(Self::paper_base()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.layers_disamb == 0 || self.layers_predict == 0 {
            return bad("both contextualizers need at least one layer".into());
        }
        if self.filter_size == 0 || self.seq_len == 0 {
            return bad("filter_size and seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.init_std <= 0.0 || self.layer_norm_eps <= 0.0 {
            return bad("init_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}
