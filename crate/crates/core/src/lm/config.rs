use serde::{Deserialize, Serialize};

use super::{LmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub dropout: f64,
    pub init_scale: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: 256,
            dropout: 0.1,
            init_scale: 0.02,
        }
    }
}

impl LMConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be positive".into());
        }
        if self.max_seq < 16 {
            return bad(format!("max_seq {} below 16", self.max_seq));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {} must be positive", self.init_scale));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Decoding policy. `temperature == 0` selects greedy argmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub rng_seed: u64,
    pub enforce_dialogue_grammar: bool,
    /// Stop once the whole sequence holds this many complete turns.
    pub max_turns: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 96,
            temperature: 0.9,
            top_k: 20,
            rng_seed: 0,
            enforce_dialogue_grammar: true,
            max_turns: None,
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            temperature: 0.0,
            top_k: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LmError::InvalidConfig(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Supervised optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub clip_norm: f64,
    pub rng_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 8,
            steps: 300,
            clip_norm: 1.0,
            rng_seed: 0,
        }
    }
}
