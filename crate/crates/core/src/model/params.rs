use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Float, ParamId, ParamStore, Tensor};

use super::{ModelConfig, ModelError};

#[derive(Clone, Debug)]
pub struct LayerLayout {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayout {
    pub input_gamma: ParamId,
    pub input_beta: ParamId,
    pub layers: Vec<LayerLayout>,
}

/// Ids of every named model tensor.
#[derive(Clone, Debug)]
pub struct Layout {
    pub sense_embeddings: ParamId,
    pub sense_bias: ParamId,
    pub mixture_logits: ParamId,
    pub position_embeddings: ParamId,
    pub disamb: EncoderLayout,
    pub predict: EncoderLayout,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and initializers in canonical order.
fn specs(cfg: &ModelConfig, total_senses: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.filter_size;
    let mut v = vec![
        ("sense_embeddings".to_string(), vec![total_senses, d], Init::Normal),
        ("sense_bias".to_string(), vec![total_senses], Init::Zeros),
        ("mixture_logits".to_string(), vec![total_senses], Init::Zeros),
        ("position_embeddings".to_string(), vec![cfg.seq_len, d], Init::Normal),
    ];
    for (prefix, layers) in [("disamb", cfg.layers_disamb), ("predict", cfg.layers_predict)] {
        v.push((format!("{prefix}.input_ln.gamma"), vec![d], Init::Ones));
        v.push((format!("{prefix}.input_ln.beta"), vec![d], Init::Zeros));
        for l in 0..layers {
            let p = format!("{prefix}.layer{l}");
            for m in ["wq", "wk", "wv", "wo"] {
                v.push((format!("{p}.attn.{m}"), vec![d, d], Init::Normal));
                v.push((format!("{p}.attn.b{}", &m[1..]), vec![d], Init::Zeros));
            }
            v.push((format!("{p}.ln1.gamma"), vec![d], Init::Ones));
            v.push((format!("{p}.ln1.beta"), vec![d], Init::Zeros));
            v.push((format!("{p}.ffn.w1"), vec![d, f], Init::Normal));
            v.push((format!("{p}.ffn.b1"), vec![f], Init::Zeros));
            v.push((format!("{p}.ffn.w2"), vec![f, d], Init::Normal));
            v.push((format!("{p}.ffn.b2"), vec![d], Init::Zeros));
            v.push((format!("{p}.ln2.gamma"), vec![d], Init::Ones));
            v.push((format!("{p}.ln2.beta"), vec![d], Init::Zeros));
        }
    }
    v
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break x as f32;
            }
        })
        .collect()
}

pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, total_senses: usize, rng: &mut R) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (name, shape, init) in specs(cfg, total_senses) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => truncated_normal(rng, cfg.init_std, n),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        store.insert(name, Tensor::new(shape, data).expect("spec shapes are consistent"));
    }
    store
}

impl Layout {
    /// Resolves every expected tensor by name and checks its shape.
    pub fn resolve<T: Float>(
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        total_senses: usize,
    ) -> Result<Self, ModelError> {
        let specs = specs(cfg, total_senses);
        if store.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "parameter store holds {} tensors, configuration expects {}",
                store.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = store.by_name(name).ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let encoder = |prefix: &str, layers: usize| EncoderLayout {
            input_gamma: id(&format!("{prefix}.input_ln.gamma")),
            input_beta: id(&format!("{prefix}.input_ln.beta")),
            layers: (0..layers)
                .map(|l| {
                    let p = format!("{prefix}.layer{l}");
                    let g = |s: &str| id(&format!("{p}.{s}"));
                    LayerLayout {
                        wq: g("attn.wq"),
                        bq: g("attn.bq"),
                        wk: g("attn.wk"),
                        bk: g("attn.bk"),
                        wv: g("attn.wv"),
                        bv: g("attn.bv"),
                        wo: g("attn.wo"),
                        bo: g("attn.bo"),
                        ln1_gamma: g("ln1.gamma"),
                        ln1_beta: g("ln1.beta"),
                        w1: g("ffn.w1"),
                        b1: g("ffn.b1"),
                        w2: g("ffn.w2"),
                        b2: g("ffn.b2"),
                        ln2_gamma: g("ln2.gamma"),
                        ln2_beta: g("ln2.beta"),
                    }
                })
                .collect(),
        };
        Ok(Layout {
            sense_embeddings: id("sense_embeddings"),
            sense_bias: id("sense_bias"),
            mixture_logits: id("mixture_logits"),
            position_embeddings: id("position_embeddings"),
            disamb: encoder("disamb", cfg.layers_disamb),
            predict: encoder("predict", cfg.layers_predict),
        })
    }

    /// Parameters of the prediction contextualizer.
    pub fn predict_ids(&self) -> Vec<ParamId> {
        encoder_ids(&self.predict)
    }

    /// Parameters of the disambiguation contextualizer.
    pub fn disamb_ids(&self) -> Vec<ParamId> {
        encoder_ids(&self.disamb)
    }
}

fn encoder_ids(e: &EncoderLayout) -> Vec<ParamId> {
    let mut v = vec![e.input_gamma, e.input_beta];
    for l in &e.layers {
        v.extend([
            l.wq,
            l.bq,
            l.wk,
            l.bk,
            l.wv,
            l.bv,
            l.wo,
            l.bo,
            l.ln1_gamma,
            l.ln1_beta,
            l.w1,
            l.b1,
            l.w2,
            l.b2,
            l.ln2_gamma,
            l.ln2_beta,
        ]);
    }
    v
}
