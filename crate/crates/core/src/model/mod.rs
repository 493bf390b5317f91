//! Desk-scale decoder-only transformer.
//!
//! Pre-norm blocks (RMSNorm, causal multi-head attention with rotary or
//! learned positions, SwiGLU MLP), an untied output head, and optional LoRA
//! factor pairs on any of the seven block projections. Forward and backward
//! passes are hand-written over `ndarray` in `f64`; reductions run in a
//! fixed order so results are reproducible run to run.

mod checkpoint;
mod forward;
mod infer;
mod params;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointHeader, NamedTensor};
pub use forward::{backward, forward, forward_train, weighted_nll_grad, Cache, Mode};
pub use infer::{greedy_generate, greedy_generate_ids, log_softmax_row, loglikelihood, loglikelihood_ids, softmax_row};
pub use params::{Block, Linear, LoraPair, Params, Projection};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}; truncate upstream")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("token id {id} outside model vocab of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("continuation is empty")]
    EmptyContinuation,
    #[error("LoRA adapters are already attached")]
    LoraAlreadyAttached,
    #[error("no LoRA adapters attached")]
    NoLora,
    #[error("invalid LoRA config: {0}")]
    LoraConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    Rotary,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub positional: Positional,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, width 32: the configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab_size,
            max_seq_len: 64,
            positional: Positional::Rotary,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positional == Positional::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::Config(
                "rotary positions need an even head dimension".into(),
            ));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

fn default_targets() -> BTreeSet<Projection> {
    BTreeSet::from([Projection::Query, Projection::Value])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default = "default_targets")]
    pub targets: BTreeSet<Projection>,
}

impl LoraConfig {
    /// Rank 64, alpha 16, dropout 0.1 on query/value.
    pub fn sft_default() -> Self {
        LoraConfig {
            rank: 64,
            alpha: 16.0,
            dropout_p: 0.1,
            targets: default_targets(),
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.rank > d_model {
            return Err(ModelError::LoraConfig(format!(
                "rank {} must be in 1..={d_model}",
                self.rank
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(ModelError::LoraConfig("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::LoraConfig("dropout_p must be in [0, 1)".into()));
        }
        if self.targets.is_empty() {
            return Err(ModelError::LoraConfig("no target projections".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(300);
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c = ModelConfig::tiny(300);
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lora_scaling_and_bounds() {
        let l = LoraConfig::sft_default();
        assert_eq!(l.scaling(), 0.25);
        assert!(l.validate(32).is_err());
        assert!(l.validate(64).is_ok());
        let bad = LoraConfig {
            dropout_p: 1.0,
            ..LoraConfig::sft_default()
        };
        assert!(bad.validate(128).is_err());
    }

    #[test]
    fn lora_config_toml_defaults_to_query_value() {
        let l: LoraConfig = toml::from_str("rank = 4\nalpha = 8.0").unwrap();
        assert_eq!(l.targets, default_targets());
        assert_eq!(l.dropout_p, 0.0);
    }
}
