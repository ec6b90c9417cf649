use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{GcnError, Result};
use crate::lm::{GenerationConfig, LMConfig, TrainHyper};
use crate::metrics::RewardWeights;
use crate::ppo::PPOConfig;
use crate::rng::RngStream;

/// Optimizer settings; the batch-order seed is derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub clip_norm: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        let t = TrainHyper::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            clip_norm: t.clip_norm,
        }
    }
}

impl OptimHyper {
    pub fn with_seed(&self, rng_seed: u64) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            clip_norm: self.clip_norm,
            rng_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GCNConfig {
    pub seed_fraction: f64,
    pub val_fraction: f64,
    /// Share of the non-seed remainder held out as the test split.
    pub test_fraction: f64,
    pub vocab_max_size: usize,
    pub vocab_min_freq: usize,
    pub embedding_dim: usize,
    pub embedding_window: usize,
    pub conversations_per_iteration: usize,
    /// Size of the synthetic set regenerated for the final learner.
    pub final_conversations: usize,
    /// Architecture of the generator; `vocab_size` is taken from the vocabulary.
    pub generator: LMConfig,
    pub learner: LMConfig,
    pub generator_pretrain: OptimHyper,
    pub learner_hyper: OptimHyper,
    pub ppo: PPOConfig,
    /// Self-play sampling policy (its `rng_seed` is replaced by run streams).
    pub gen: GenerationConfig,
    /// Token cap of greedy learner responses during evaluation.
    pub eval_max_new_tokens: usize,
    pub weights: RewardWeights,
    pub tolerance: f64,
    pub patience: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
}

impl Default for GCNConfig {
    fn default() -> Self {
        Self {
            seed_fraction: 0.1,
            val_fraction: 0.2,
            test_fraction: 0.1,
            vocab_max_size: 5000,
            vocab_min_freq: 1,
            embedding_dim: 32,
            embedding_window: 2,
            conversations_per_iteration: 16,
            final_conversations: 128,
            generator: LMConfig::default(),
            learner: LMConfig::default(),
            generator_pretrain: OptimHyper::default(),
            learner_hyper: OptimHyper::default(),
            ppo: PPOConfig::default(),
            gen: GenerationConfig::default(),
            eval_max_new_tokens: 40,
            weights: RewardWeights::default(),
            tolerance: 1e-3,
            patience: 3,
            max_iterations: 50,
            rng_seed: 0,
        }
    }
}

impl GCNConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GcnError::Config(m));
        if !(self.seed_fraction > 0.0 && self.seed_fraction <= 1.0) {
            return bad(format!("seed_fraction {} outside (0, 1]", self.seed_fraction));
        }
        for (name, f) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("{name} {f} outside [0, 1)"));
            }
        }
        for (name, n) in [
            ("conversations_per_iteration", self.conversations_per_iteration),
            ("final_conversations", self.final_conversations),
            ("patience", self.patience),
            ("max_iterations", self.max_iterations),
            ("embedding_dim", self.embedding_dim),
            ("eval_max_new_tokens", self.eval_max_new_tokens),
            ("learner_hyper.batch_size", self.learner_hyper.batch_size),
            ("generator_pretrain.batch_size", self.generator_pretrain.batch_size),
        ] {
            if n == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return bad(format!("tolerance {} must be >= 0", self.tolerance));
        }
        self.weights.validate().map_err(GcnError::Config)?;
        self.ppo.validate()?;
        self.gen.validate()?;
        for (name, c) in [("generator", &self.generator), ("learner", &self.learner)] {
            // vocab_size is filled in later; check the rest with a stand-in
            LMConfig { vocab_size: 8, ..c.clone() }
                .validate()
                .map_err(|e| GcnError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Seed for a named sub-stream of the run.
    pub fn derive_seed(&self, name: &str) -> u64 {
        RngStream::new(self.rng_seed).split_named(name).next_u64()
    }

    /// Flat `{"a.b.c": value}` object mirroring the nested structure.
    pub fn to_flat_json(&self) -> Value {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        Value::Object(out)
    }

    /// Applies dotted-key overrides on top of `self`. Unknown keys are
    /// rejected.
    pub fn with_overrides(&self, flat: &Map<String, Value>) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, value) in flat {
            set_path(&mut tree, key, value.clone())?;
        }
        serde_json::from_value(tree).map_err(|e| GcnError::Config(e.to_string()))
    }

    /// Parses a flat dotted-key JSON object over the defaults.
    pub fn from_flat_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| GcnError::Config(format!("config JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(GcnError::Config("config must be a JSON object".into()));
        };
        Self::default().with_overrides(&map)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(GcnError::Config(format!("unknown config key {key:?}")));
        };
        let Some(child) = map.get_mut(*part) else {
            return Err(GcnError::Config(format!("unknown config key {key:?}")));
        };
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(GcnError::Config(format!("config key {key:?} names a group, not a value")));
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut c = GCNConfig::default();
        c.ppo.kl_coef = 0.2;
        c.learner.d_model = 32;
        c.gen.max_turns = Some(6);
        let flat = c.to_flat_json();
        assert_eq!(flat["ppo.kl_coef"], 0.2);
        let back = GCNConfig::from_flat_json(&flat.to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = GCNConfig::from_flat_json(r#"{"max_iterations": 2, "weights.w_s": 0.5}"#).unwrap();
        assert_eq!(c.max_iterations, 2);
        assert_eq!(c.weights.w_s, 0.5);
        assert_eq!(c.tolerance, 1e-3);
        assert!(GCNConfig::from_flat_json(r#"{"max_iteration": 2}"#).is_err());
        assert!(GCNConfig::from_flat_json(r#"{"ppo": 2}"#).is_err());
        assert!(GCNConfig::from_flat_json(r#"{"max_iterations": "x"}"#).is_err());
    }

    #[test]
    fn defaults_validate() {
        GCNConfig::default().validate().unwrap();
        let c = GCNConfig {
            seed_fraction: 0.0,
            ..GCNConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
