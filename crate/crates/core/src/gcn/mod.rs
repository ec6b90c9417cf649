//! The outer loop: a generator writes synthetic conversations, a fresh
//! learner is trained on them, its validation score becomes the generator's
//! reward, and PPO nudges the generator toward more useful data.

mod baselines;
mod config;
mod rundir;

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{decode_tokens, extract_prompts, Corpus, CorpusError, Prompt, Vocab};
use crate::lm::{learner_dataset_from, lm_dataset_from, train_supervised, GenerationConfig, LMConfig, LMModel, LmError};
use crate::metrics::{evaluate_learner, EmbeddingTable, MetricReport, MetricsError};
use crate::ppo::{
    assign_rewards, compute_advantages, ppo_update, rollout_requests, rollouts_from_requests, PpoError, PpoOptimizer, PpoStats,
    RolloutBatch, RolloutRequest, ValueHead,
};
use crate::rng::RngStream;

pub use baselines::{prepare, run_baselines, BaselineResults, BaselineRow, Condition, Prepared};
pub use config::{GCNConfig, OptimHyper};
pub use rundir::{read_history, FinalSummary, RunDir, CONFIG_FILE, DPRIME_FILE, FINAL_FILE, HISTORY_FILE, PPO_LOG_FILE, TIMINGS_FILE};

#[derive(Debug, Error)]
pub enum GcnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("no seed conversation yields a prompt that fits the generator")]
    NoPrompts,
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, GcnError>;

/// The fixed inputs every iteration sees.
#[derive(Clone, Copy, Debug)]
pub struct SeedData<'a> {
    pub seed_train: &'a Corpus,
    pub seed_val: &'a Corpus,
    pub vocab: &'a Vocab,
    pub table: &'a EmbeddingTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Conversations in the synthetic set that were kept.
    pub dataset_size: usize,
    /// Combined validation reward of the learner trained on that set.
    pub reward: f64,
    pub report: MetricReport,
    /// Mean per-action `old - ref` of the rollouts.
    pub mean_kl: f64,
    /// `None` when the policy update is disabled.
    pub ppo: Option<PpoStats>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Observer of the loop, called once per iteration with the generator that
/// produced that iteration's data.
pub trait IterationSink {
    fn record(&mut self, rec: &IterationRecord, generator: &LMModel) -> Result<()>;
}

impl IterationSink for () {
    fn record(&mut self, _: &IterationRecord, _: &LMModel) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&IterationRecord, &LMModel) -> Result<()>> IterationSink for F {
    fn record(&mut self, rec: &IterationRecord, generator: &LMModel) -> Result<()> {
        self(rec, generator)
    }
}

#[derive(Clone, Debug)]
pub struct GCNRun {
    pub history: Vec<IterationRecord>,
    pub best_iteration: usize,
    pub best_generator: LMModel,
    pub final_dprime: Corpus,
    pub final_learner: LMModel,
    /// The final learner scored on the seed validation split.
    pub final_report: MetricReport,
    /// Share of synthetic conversations that reproduce a seed conversation.
    pub copy_rate: f64,
    pub ppo_applied: bool,
}

impl GCNRun {
    pub fn best_reward(&self) -> f64 {
        self.history[self.best_iteration].reward
    }
}

pub(crate) fn model_config(base: &LMConfig, vocab: &Vocab) -> LMConfig {
    LMConfig {
        vocab_size: vocab.len(),
        ..base.clone()
    }
}

pub fn eval_generation(config: &GCNConfig) -> GenerationConfig {
    GenerationConfig::greedy(config.eval_max_new_tokens)
}

/// Language-model pretraining of the generator on whole seed conversations.
pub fn pretrain_generator(seed_train: &Corpus, vocab: &Vocab, config: &GCNConfig) -> Result<LMModel> {
    let lm_cfg = model_config(&config.generator, vocab);
    let mut model = LMModel::init(lm_cfg, config.derive_seed("generator_init"))?;
    let data = lm_dataset_from(seed_train, vocab, model.config().max_seq);
    if data.examples.is_empty() {
        return Err(LmError::EmptyDataset("no conversation fits max_seq".into()).into());
    }
    let hyper = config.generator_pretrain.with_seed(config.derive_seed("generator_pretrain"));
    train_supervised(&mut model, &data.examples, &hyper)?;
    Ok(model)
}

/// A learner from the fixed base initialization, trained on `train`.
pub fn spawn_and_train_learner(train: &Corpus, vocab: &Vocab, config: &GCNConfig) -> Result<LMModel> {
    let lm_cfg = model_config(&config.learner, vocab);
    let mut model = LMModel::init(lm_cfg, config.derive_seed("learner_init"))?;
    let data = learner_dataset_from(train, vocab, model.config().max_seq);
    if data.examples.is_empty() {
        return Err(LmError::EmptyDataset("no conversation fits max_seq".into()).into());
    }
    let hyper = config.learner_hyper.with_seed(config.derive_seed("learner_train"));
    train_supervised(&mut model, &data.examples, &hyper)?;
    Ok(model)
}

/// Prompts whose `BOS` + opening turns leave room to generate.
pub fn usable_prompts(seed_train: &Corpus, vocab: &Vocab, generator_max_seq: usize) -> Vec<(Prompt, RolloutRequest)> {
    let (prompts, _) = extract_prompts(seed_train);
    let requests = rollout_requests(&prompts, vocab);
    prompts
        .into_iter()
        .zip(requests)
        .filter(|(_, r)| r.prefix.len() + 2 <= generator_max_seq)
        .collect()
}

/// `n` indices into `0..available`: without replacement when possible.
fn sample_indices(available: usize, n: usize, rng: &mut RngStream) -> Vec<usize> {
    if n <= available {
        let mut all: Vec<usize> = (0..available).collect();
        rng.shuffle(&mut all);
        all.truncate(n);
        all
    } else {
        (0..n).map(|_| rng.below(available)).collect()
    }
}

/// Raw prompt turns followed by the generated turns that completed. Returns
/// `None` when the generator finished no turn of its own.
fn synthetic_conversation(prompt: &Prompt, ids: &[u32], vocab: &Vocab, id: String) -> Option<crate::corpus::Conversation> {
    let decoded = decode_tokens(ids, vocab).ok()?;
    let n_prompt = prompt.turns.len();
    if decoded.turns.len() <= n_prompt {
        return None;
    }
    let mut turns = prompt.turns.clone();
    turns.extend(decoded.turns[n_prompt..].iter().cloned());
    let mut conv = crate::corpus::Conversation::new(id, turns);
    conv.source_prompt_id = Some(prompt.source_conversation_id.clone());
    conv.synthetic = true;
    conv.validate().ok()?;
    Some(conv)
}

/// Samples `n` prompts, rolls the generator out from each and keeps the
/// continuations that finished at least one turn.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    generator: &LMModel,
    value_head: &ValueHead,
    reference: &LMModel,
    prompts: &[(Prompt, RolloutRequest)],
    vocab: &Vocab,
    n: usize,
    gen: &GenerationConfig,
    rng: &RngStream,
    id_prefix: &str,
) -> Result<(Corpus, RolloutBatch)> {
    if prompts.is_empty() {
        return Err(GcnError::NoPrompts);
    }
    let picks = sample_indices(prompts.len(), n, &mut rng.split_named("prompts"));
    let requests: Vec<RolloutRequest> = picks.iter().map(|&i| prompts[i].1.clone()).collect();
    let batch = rollouts_from_requests(generator, value_head, reference, &requests, gen, &rng.split_named("rollouts"))?;
    let convs = picks
        .iter()
        .zip(&batch.episodes)
        .enumerate()
        .filter_map(|(k, (&i, ep))| synthetic_conversation(&prompts[i].0, &ep.ids(), vocab, format!("{id_prefix}-{k:05}")))
        .collect();
    Ok((Corpus::new(format!("{id_prefix}-dprime"), convs)?, batch))
}

/// Fraction of `synthetic` conversations whose token sequence equals some
/// conversation of `seed`.
pub fn copy_rate(synthetic: &Corpus, seed: &Corpus, vocab: &Vocab) -> f64 {
    if synthetic.is_empty() {
        return 0.0;
    }
    let key = |c: &crate::corpus::Conversation| crate::corpus::encode_turns(&c.turns, vocab);
    let seen: HashSet<Vec<u32>> = seed.conversations.iter().map(key).collect();
    let copies = synthetic.conversations.iter().filter(|c| seen.contains(&key(c))).count();
    copies as f64 / synthetic.len() as f64
}

/// Learner score for a synthetic set; an empty set scores 0.
fn dataset_reward(dprime: &Corpus, data: &SeedData, config: &GCNConfig) -> Result<MetricReport> {
    if dprime.is_empty() {
        let positions = data.seed_val.conversations.iter().map(|c| c.turns.len().saturating_sub(1)).sum();
        return Ok(MetricReport::zero(positions));
    }
    let learner = spawn_and_train_learner(dprime, data.vocab, config)?;
    Ok(evaluate_learner(
        &learner,
        data.seed_val,
        data.vocab,
        data.table,
        &eval_generation(config),
        &config.weights,
    )?)
}

fn iteration_stream(config: &GCNConfig, iteration: usize) -> RngStream {
    RngStream::new(config.rng_seed).split_named("iteration").split(iteration as u64)
}

/// Loop state between iterations.
pub struct GcnState<'a> {
    config: GCNConfig,
    data: SeedData<'a>,
    prompts: Vec<(Prompt, RolloutRequest)>,
    generator: LMModel,
    reference: LMModel,
    value_head: ValueHead,
    opt: PpoOptimizer,
    apply_ppo: bool,
    next_iteration: usize,
}

impl<'a> GcnState<'a> {
    /// Starts from a pretrained generator, which also becomes the frozen KL
    /// reference.
    pub fn new(config: &GCNConfig, data: SeedData<'a>, generator: LMModel, apply_ppo: bool) -> Result<Self> {
        config.validate()?;
        let prompts = usable_prompts(data.seed_train, data.vocab, generator.config().max_seq);
        if prompts.is_empty() {
            return Err(GcnError::NoPrompts);
        }
        Ok(Self {
            config: config.clone(),
            data,
            prompts,
            reference: generator.clone(),
            value_head: ValueHead::new(generator.config().d_model),
            opt: PpoOptimizer::new(config.ppo.lr),
            generator,
            apply_ppo,
            next_iteration: 0,
        })
    }

    pub fn generator(&self) -> &LMModel {
        &self.generator
    }

    pub fn prompts(&self) -> &[(Prompt, RolloutRequest)] {
        &self.prompts
    }

    /// Generate, train a learner, score it, and (optionally) update the
    /// generator with the score as reward.
    pub fn gcn_iteration(&mut self) -> Result<IterationRecord> {
        let started = Instant::now();
        let k = self.next_iteration;
        let stream = iteration_stream(&self.config, k);
        let (dprime, mut batch) = generate_dataset(
            &self.generator,
            &self.value_head,
            &self.reference,
            &self.prompts,
            self.data.vocab,
            self.config.conversations_per_iteration,
            &self.config.gen,
            &stream.split_named("generate"),
            &format!("syn-{k}"),
        )?;
        let report = dataset_reward(&dprime, &self.data, &self.config)?;
        let reward = report.combined_reward;
        let ppo = if self.apply_ppo {
            let c = &self.config.ppo;
            assign_rewards(&mut batch, reward, c.kl_coef)?;
            compute_advantages(&mut batch, c.gamma, c.lambda, c.advantage_whitening)?;
            Some(ppo_update(
                &mut self.generator,
                &mut self.value_head,
                &mut self.opt,
                &batch,
                c,
                &stream.split_named("ppo"),
            )?)
        } else {
            None
        };
        self.next_iteration += 1;
        Ok(IterationRecord {
            iteration: k,
            dataset_size: dprime.len(),
            reward,
            report,
            mean_kl: batch.mean_kl(),
            ppo,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Recomputes iteration `k`'s reward from the generator that produced it.
pub fn replay_reward(generator: &LMModel, data: SeedData, config: &GCNConfig, iteration: usize) -> Result<f64> {
    let prompts = usable_prompts(data.seed_train, data.vocab, generator.config().max_seq);
    let (dprime, _) = generate_dataset(
        generator,
        &ValueHead::new(generator.config().d_model),
        generator,
        &prompts,
        data.vocab,
        config.conversations_per_iteration,
        &config.gen,
        &iteration_stream(config, iteration).split_named("generate"),
        &format!("syn-{iteration}"),
    )?;
    Ok(dataset_reward(&dprime, &data, config)?.combined_reward)
}

/// True once `patience` consecutive reward changes stayed below `tolerance`.
pub fn converged(history: &[IterationRecord], tolerance: f64, patience: usize) -> bool {
    if history.len() <= patience {
        return false;
    }
    history[history.len() - patience - 1..]
        .windows(2)
        .all(|w| (w[1].reward - w[0].reward).abs() < tolerance)
}

/// Iterates until the reward settles or `max_iterations`, then regenerates a
/// synthetic set with the best-rewarded generator and trains the final
/// learner on seed data plus that set.
pub fn run_gcn(
    config: &GCNConfig,
    data: SeedData,
    generator: LMModel,
    apply_ppo: bool,
    sink: &mut dyn IterationSink,
) -> Result<GCNRun> {
    let mut state = GcnState::new(config, data, generator, apply_ppo)?;
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut best: Option<(usize, LMModel)> = None;
    while history.len() < config.max_iterations {
        let before = state.generator.clone();
        let rec = state.gcn_iteration()?;
        log::info!("iteration {} reward {:.6} |D'| {}", rec.iteration, rec.reward, rec.dataset_size);
        sink.record(&rec, &before)?;
        let improved = match &best {
            None => true,
            Some((b, _)) => rec.reward > history[*b].reward,
        };
        if improved {
            best = Some((rec.iteration, before));
        }
        history.push(rec);
        if converged(&history, config.tolerance, config.patience) {
            break;
        }
    }
    let (best_iteration, best_generator) = best.expect("at least one iteration runs");
    let final_stream = RngStream::new(config.rng_seed).split_named("final");
    let (final_dprime, _) = generate_dataset(
        &best_generator,
        &state.value_head,
        &state.reference,
        &state.prompts,
        data.vocab,
        config.final_conversations,
        &config.gen,
        &final_stream,
        "syn-final",
    )?;
    let train = Corpus::concat("seed+dprime", &[data.seed_train, &final_dprime])?;
    let final_learner = spawn_and_train_learner(&train, data.vocab, config)?;
    let final_report = evaluate_learner(
        &final_learner,
        data.seed_val,
        data.vocab,
        data.table,
        &eval_generation(config),
        &config.weights,
    )?;
    Ok(GCNRun {
        copy_rate: copy_rate(&final_dprime, data.seed_train, data.vocab),
        history,
        best_iteration,
        best_generator,
        final_dprime,
        final_learner,
        final_report,
        ppo_applied: apply_ppo,
    })
}

#[cfg(test)]
mod tests;
