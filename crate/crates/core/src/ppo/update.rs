use serde::{Deserialize, Serialize};

use super::{Episode, PPOConfig, PpoError, Result, RolloutBatch, ValueHead};
use crate::lm::{add_flat_grads, flat_grads, LMModel};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::{clip_grad_norm, Adam, Tape, Tensor, TensorError};

/// Optimizer state shared by the generator and its value head; persists
/// across PPO iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoOptimizer {
    adam: Adam,
}

impl PpoOptimizer {
    pub fn new(lr: f64) -> Self {
        Self { adam: Adam::new(lr) }
    }

    pub fn steps(&self) -> u64 {
        self.adam.t
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    /// Mean over minibatch steps of the per-action clipped-surrogate loss.
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean per-action `old - ref` over the rollouts.
    pub mean_kl: f64,
    /// Fraction of action evaluations with `|r - 1| > eps`.
    pub clip_fraction: f64,
    pub minibatch_steps: usize,
}

struct EpisodeGrad {
    policy: f64,
    value: f64,
    clipped: usize,
    actions: usize,
    grads: Vec<f64>,
}

fn episode_grad(generator: &LMModel, value_head: &ValueHead, ep: &Episode, cfg: &PPOConfig, scale: f64) -> Result<EpisodeGrad> {
    let ids = ep.ids();
    let p = ep.prompt.len();
    let mut tape = Tape::new();
    let fv = generator.forward_tape(&mut tape, &ids[..ids.len() - 1], None)?;
    let rows: Vec<usize> = (p - 1..ids.len() - 1).collect();
    let logits = tape.gather_rows(fv.logits, &rows)?;
    let lp = tape.log_softmax_gather(logits, &ep.generated)?;
    let mask: Vec<bool> = ep.forced.iter().map(|f| !f).collect();
    let policy = tape.ppo_clip_objective(lp, &ep.old_logprobs, &ep.advantages, &mask, cfg.clip_eps, scale)?;

    let hidden = tape.gather_rows(fv.hidden, &rows)?;
    let w = tape.leaf(&value_head.params()[0]);
    let b = tape.leaf(&value_head.params()[1]);
    let v = tape.matmul(hidden, w)?;
    let v = tape.add_row(v, b)?;
    let value = tape.mse_scaled(v, &ep.returns, &mask, scale)?;
    let weighted = tape.scale(value, cfg.value_loss_coef)?;
    let mut loss = tape.add(policy, weighted)?;
    if cfg.entropy_coef != 0.0 {
        let ent = tape.entropy_scaled(logits, &mask, -cfg.entropy_coef * scale)?;
        loss = tape.add(loss, ent)?;
    }
    tape.backward(loss)?;

    let clipped = tape
        .value(lp)
        .iter()
        .zip(&ep.old_logprobs)
        .zip(&mask)
        .filter(|((new, old), &m)| m && ((*new - *old).exp() - 1.0).abs() > cfg.clip_eps)
        .count();
    let mut grads = flat_grads(&tape, &fv.params, generator.params());
    grads.extend(flat_grads(&tape, &[w, b], value_head.params()));
    Ok(EpisodeGrad {
        policy: tape.scalar(policy),
        value: tape.scalar(value),
        clipped,
        actions: ep.actions(),
        grads,
    })
}

fn trainable<'a>(generator: &'a mut LMModel, value_head: &'a mut ValueHead) -> impl Iterator<Item = &'a mut Tensor> {
    generator.params_mut().iter_mut().chain(value_head.params_mut().iter_mut())
}

/// `ppo_epochs` passes over shuffled episode minibatches. Each minibatch
/// takes one clipped Adam step on `policy + c_v·value − c_e·entropy`, with
/// every term averaged over the minibatch's actions. A non-finite loss
/// restores generator, value head and optimizer to their state on entry.
pub fn ppo_update(
    generator: &mut LMModel,
    value_head: &mut ValueHead,
    opt: &mut PpoOptimizer,
    batch: &RolloutBatch,
    cfg: &PPOConfig,
    rng: &RngStream,
) -> Result<PpoStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    for (k, ep) in batch.episodes.iter().enumerate() {
        ep.check(k)?;
        for (what, got) in [("advantages", ep.advantages.len()), ("returns", ep.returns.len())] {
            if got != ep.generated.len() {
                return Err(PpoError::Length {
                    episode: k,
                    what,
                    got,
                    expected: ep.generated.len(),
                });
            }
        }
    }
    let snapshot = (generator.clone(), value_head.clone(), opt.clone());
    opt.adam.lr = cfg.lr;
    match run_epochs(generator, value_head, opt, batch, cfg, rng) {
        Ok(mut stats) => {
            stats.mean_kl = batch.mean_kl();
            Ok(stats)
        }
        Err(e) => {
            (*generator, *value_head, *opt) = snapshot;
            match e {
                PpoError::Tensor(t) => Err(PpoError::NonFinite(t.to_string())),
                PpoError::Lm(crate::lm::LmError::Tensor(t)) => Err(PpoError::NonFinite(t.to_string())),
                other => Err(other),
            }
        }
    }
}

fn run_epochs(
    generator: &mut LMModel,
    value_head: &mut ValueHead,
    opt: &mut PpoOptimizer,
    batch: &RolloutBatch,
    cfg: &PPOConfig,
    rng: &RngStream,
) -> Result<PpoStats> {
    let usable: Vec<usize> = (0..batch.len()).filter(|&k| batch.episodes[k].actions() > 0).collect();
    let mut stats = PpoStats::default();
    let (mut clipped, mut evaluated) = (0usize, 0usize);
    generator.zero_grads();
    value_head.params_mut().iter_mut().for_each(Tensor::zero_grad);
    for epoch in 0..cfg.ppo_epochs {
        let mut order = usable.clone();
        rng.split(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.minibatch_size) {
            let actions: usize = chunk.iter().map(|&k| batch.episodes[k].actions()).sum();
            let scale = 1.0 / actions as f64;
            let (g, vh): (&LMModel, &ValueHead) = (generator, value_head);
            let parts = par::map(chunk, |&k| episode_grad(g, vh, &batch.episodes[k], cfg, scale));
            let mut grads = Vec::with_capacity(parts.len());
            let (mut pl, mut vl) = (0.0, 0.0);
            for part in parts {
                let part = part?;
                pl += part.policy;
                vl += part.value;
                clipped += part.clipped;
                evaluated += part.actions;
                grads.push(part.grads);
            }
            if !(pl.is_finite() && vl.is_finite()) {
                return Err(TensorError::NonFinite { op: "ppo loss" }.into());
            }
            let total = par::sum_in_order(&grads);
            let n_gen: usize = generator.params().iter().map(Tensor::len).sum();
            generator.add_flat_grads(&total[..n_gen]);
            add_flat_grads(value_head.params_mut(), &total[n_gen..]);
            clip_grad_norm(trainable(generator, value_head), cfg.max_grad_norm);
            opt.adam.step(trainable(generator, value_head))?;
            if !(generator.all_finite() && value_head.params().iter().all(Tensor::is_finite)) {
                return Err(TensorError::NonFinite { op: "ppo parameters" }.into());
            }
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.minibatch_steps += 1;
        }
    }
    if stats.minibatch_steps > 0 {
        stats.policy_loss /= stats.minibatch_steps as f64;
        stats.value_loss /= stats.minibatch_steps as f64;
    }
    if evaluated > 0 {
        stats.clip_fraction = clipped as f64 / evaluated as f64;
    }
    Ok(stats)
}
