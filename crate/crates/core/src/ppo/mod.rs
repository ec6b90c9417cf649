//! Clipped-surrogate policy optimization of the generator over token actions.
//!
//! Forced speaker tokens are environment moves, not actions: they carry no
//! reward, no KL term, no advantage and never enter the policy loss.

mod rollout;
mod update;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::LmError;
use crate::tensor::{Tensor, TensorError};

pub use rollout::{collect_rollouts, rollout_requests, rollouts_from_requests, RolloutRequest};
pub use update::{ppo_update, PpoOptimizer, PpoStats};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("episode {episode}: {what} has length {got}, expected {expected}")]
    Length {
        episode: usize,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("rollout batch is empty")]
    EmptyBatch,
    #[error("non-finite loss in update (parameters restored): {0}")]
    NonFinite(String),
    #[error("invalid PPO configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, PpoError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub ppo_epochs: usize,
    /// Episodes per minibatch.
    pub minibatch_size: usize,
    pub lr: f64,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub advantage_whitening: bool,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.05,
            ppo_epochs: 4,
            minibatch_size: 8,
            lr: 1e-3,
            value_loss_coef: 0.5,
            entropy_coef: 0.0,
            advantage_whitening: true,
            max_grad_norm: 1.0,
            gamma: 1.0,
            lambda: 0.95,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PpoError::InvalidConfig(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps {} outside (0, 1)", self.clip_eps));
        }
        if self.kl_coef.is_nan() || self.kl_coef < 0.0 {
            return bad(format!("kl_coef {} must be >= 0", self.kl_coef));
        }
        if self.ppo_epochs == 0 || self.minibatch_size == 0 {
            return bad("ppo_epochs and minibatch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("lr must be >= 0 and max_grad_norm > 0".into());
        }
        if !((0.0..=1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.lambda)) {
            return bad("gamma and lambda must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Linear critic on the generator's final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueHead {
    params: [Tensor; 2],
}

impl ValueHead {
    /// Zero-initialized, so the first value predictions are exactly 0.
    pub fn new(d_model: usize) -> Self {
        Self {
            params: [Tensor::zeros(&[d_model, 1]).param(), Tensor::zeros(&[1]).param()],
        }
    }

    pub fn d_model(&self) -> usize {
        self.params[0].shape()[0]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn predict(&self, hidden_row: &[f64]) -> f64 {
        let w = self.params[0].data();
        hidden_row.iter().zip(w).map(|(h, w)| h * w).sum::<f64>() + self.params[1].data()[0]
    }
}

/// One self-play continuation. Per-token vectors align with `generated`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub source_prompt_id: String,
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    /// Untempered policy log-probabilities at sampling time (0 where forced).
    pub old_logprobs: Vec<f64>,
    /// Frozen reference log-probabilities (0 where forced).
    pub ref_logprobs: Vec<f64>,
    pub forced: Vec<bool>,
    pub values: Vec<f64>,
    pub terminal_reward: f64,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Episode {
    pub fn ids(&self) -> Vec<u32> {
        let mut ids = self.prompt.clone();
        ids.extend(&self.generated);
        ids
    }

    pub fn actions(&self) -> usize {
        self.forced.iter().filter(|&&f| !f).count()
    }

    /// Per-token KL estimate `old - ref`, zero at forced positions.
    pub fn kl_terms(&self) -> Vec<f64> {
        self.old_logprobs
            .iter()
            .zip(&self.ref_logprobs)
            .zip(&self.forced)
            .map(|((o, r), &f)| if f { 0.0 } else { o - r })
            .collect()
    }

    fn check(&self, k: usize) -> Result<()> {
        let n = self.generated.len();
        for (what, got) in [
            ("old_logprobs", self.old_logprobs.len()),
            ("ref_logprobs", self.ref_logprobs.len()),
            ("forced", self.forced.len()),
            ("values", self.values.len()),
        ] {
            if got != n {
                return Err(PpoError::Length {
                    episode: k,
                    what,
                    got,
                    expected: n,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub episodes: Vec<Episode>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn actions(&self) -> usize {
        self.episodes.iter().map(Episode::actions).sum()
    }

    /// Mean per-action KL estimate over the batch.
    pub fn mean_kl(&self) -> f64 {
        let n = self.actions();
        if n == 0 {
            return 0.0;
        }
        self.episodes.iter().flat_map(|e| e.kl_terms()).sum::<f64>() / n as f64
    }

    pub fn mean_terminal_reward(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.terminal_reward).sum::<f64>() / self.len() as f64
    }
}

/// Broadcasts one dataset-level reward to every episode.
pub fn assign_rewards(batch: &mut RolloutBatch, dataset_reward: f64, beta: f64) -> Result<()> {
    let rewards = vec![dataset_reward; batch.len()];
    assign_episode_rewards(batch, &rewards, beta)
}

/// `r_t = -β (old_t - ref_t)` at every action, plus the episode's terminal
/// reward on its last action. Forced positions get 0.
pub fn assign_episode_rewards(batch: &mut RolloutBatch, terminal: &[f64], beta: f64) -> Result<()> {
    if terminal.len() != batch.len() {
        return Err(PpoError::Length {
            episode: 0,
            what: "terminal rewards",
            got: terminal.len(),
            expected: batch.len(),
        });
    }
    for (k, (ep, &r)) in batch.episodes.iter_mut().zip(terminal).enumerate() {
        ep.check(k)?;
        ep.terminal_reward = r;
        ep.rewards = ep.kl_terms().iter().map(|kl| -beta * kl).collect();
        if let Some(last) = ep.forced.iter().rposition(|&f| !f) {
            ep.rewards[last] += r;
        }
    }
    Ok(())
}

/// GAE over each episode's action positions (forced tokens are skipped as
/// transitions of the environment), then optional whitening over all actions
/// in the batch. `returns = advantages + values` before whitening.
pub fn compute_advantages(batch: &mut RolloutBatch, gamma: f64, lambda: f64, whiten: bool) -> Result<()> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    for (k, ep) in batch.episodes.iter_mut().enumerate() {
        ep.check(k)?;
        if ep.rewards.len() != ep.generated.len() {
            return Err(PpoError::Length {
                episode: k,
                what: "rewards",
                got: ep.rewards.len(),
                expected: ep.generated.len(),
            });
        }
        let n = ep.generated.len();
        ep.advantages = vec![0.0; n];
        ep.returns = ep.values.clone();
        let actions: Vec<usize> = (0..n).filter(|&t| !ep.forced[t]).collect();
        let mut gae = 0.0;
        let mut next_value = 0.0;
        for &t in actions.iter().rev() {
            let delta = ep.rewards[t] + gamma * next_value - ep.values[t];
            gae = delta + gamma * lambda * gae;
            ep.advantages[t] = gae;
            ep.returns[t] = gae + ep.values[t];
            next_value = ep.values[t];
        }
    }
    if whiten {
        let all: Vec<f64> = batch
            .episodes
            .iter()
            .flat_map(|e| e.advantages.iter().zip(&e.forced).filter(|(_, &f)| !f).map(|(a, _)| *a))
            .collect();
        if !all.is_empty() {
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            let div = if std < 1e-8 { 1.0 } else { std };
            for ep in &mut batch.episodes {
                for (a, &f) in ep.advantages.iter_mut().zip(&ep.forced) {
                    if !f {
                        *a = (*a - mean) / div;
                    }
                }
            }
        }
    }
    if batch.episodes.iter().flat_map(|e| &e.advantages).any(|a| !a.is_finite()) {
        return Err(PpoError::NonFinite("advantages".into()));
    }
    Ok(())
}

/// One line of the per-iteration training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoLogLine {
    pub iter: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_reward: f64,
}

pub fn append_log(path: &Path, line: &PpoLogLine) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PpoError::Io(format!("{}: {e}", path.display())))?;
    let json = serde_json::to_string(line).expect("log line serializes");
    writeln!(f, "{json}").map_err(|e| PpoError::Io(format!("{}: {e}", path.display())))
}
