//! Reference-based response metrics and the weighted reward built from them.

mod embed;
mod overlap;

pub use embed::{embed_score, train_embeddings, EmbeddingTable};
pub use overlap::{bleu, lcs_len, rouge_l, rouge_n, BleuStats, Prf, Smoothing};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Special, Vocab};
use crate::lm::{generate, response_context, GenerationConfig, LMModel, LmError};
use crate::par;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("embedding table: {0}")]
    Embedding(String),
    #[error("validation corpus has no evaluable turn positions")]
    NothingToEvaluate,
    #[error("embedding table covers {table} ids but the vocabulary has {vocab}")]
    TableMismatch { table: usize, vocab: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const BLEU_MAX_N: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w_b: f64,
    pub w_r: f64,
    pub w_s: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_b: 0.1,
            w_r: 0.01,
            w_s: 0.95,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if [self.w_b, self.w_r, self.w_s].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(format!("reward weights must be finite and >= 0, got {self:?}"))
        }
    }
}

/// `w_b·bleu + w_r·rouge1_f + w_s·embed_f`
pub fn combined_reward(bleu: f64, rouge1_f: f64, embed_f: f64, w: &RewardWeights) -> f64 {
    w.w_b * bleu + w.w_r * rouge1_f + w.w_s * embed_f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub embed_f: f64,
    pub combined_reward: f64,
    pub n_samples: usize,
}

impl MetricReport {
    /// Report of a learner that produced nothing at all.
    pub fn zero(n_samples: usize) -> Self {
        Self {
            bleu: 0.0,
            rouge1_f: 0.0,
            rouge2_f: 0.0,
            rouge_l_f: 0.0,
            embed_f: 0.0,
            combined_reward: 0.0,
            n_samples,
        }
    }

    pub const CSV_HEADER: &'static str = "bleu,rouge1,rouge2,rougeL,embed,combined,n_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.bleu, self.rouge1_f, self.rouge2_f, self.rouge_l_f, self.embed_f, self.combined_reward, self.n_samples
        )
    }
}

/// Per-position scores; reduced in position order.
struct Sample {
    bleu: BleuStats,
    rouge1: f64,
    rouge2: f64,
    rouge_l: f64,
    embed: f64,
}

/// Scores a list of `(hypothesis, reference)` pairs: corpus-level BLEU,
/// macro-averaged ROUGE and embedding F1.
pub fn score_pairs(pairs: &[(Vec<u32>, Vec<u32>)], table: &EmbeddingTable, weights: &RewardWeights) -> MetricReport {
    let samples = par::map(pairs, |(h, r)| score_one(h, r, table));
    aggregate(&samples, weights)
}

fn score_one(hyp: &[u32], reference: &[u32], table: &EmbeddingTable) -> Sample {
    Sample {
        bleu: BleuStats::of(hyp, reference, BLEU_MAX_N),
        rouge1: rouge_n(hyp, reference, 1).f1,
        rouge2: rouge_n(hyp, reference, 2).f1,
        rouge_l: rouge_l(hyp, reference).f1,
        embed: embed_score(hyp, reference, table).f1,
    }
}

fn aggregate(samples: &[Sample], weights: &RewardWeights) -> MetricReport {
    let n = samples.len();
    if n == 0 {
        return MetricReport::zero(0);
    }
    let mut stats = BleuStats::zero(BLEU_MAX_N);
    let (mut r1, mut r2, mut rl, mut e) = (0.0, 0.0, 0.0, 0.0);
    for s in samples {
        stats.add(&s.bleu);
        r1 += s.rouge1;
        r2 += s.rouge2;
        rl += s.rouge_l;
        e += s.embed;
    }
    let nf = n as f64;
    let bleu = stats.score(Smoothing::AddOne);
    let (rouge1_f, embed_f) = (r1 / nf, e / nf);
    MetricReport {
        bleu,
        rouge1_f,
        rouge2_f: r2 / nf,
        rouge_l_f: rl / nf,
        embed_f,
        combined_reward: combined_reward(bleu, rouge1_f, embed_f, weights),
        n_samples: n,
    }
}

/// Greedy response to gold context for one turn position, as word ids with
/// the closing SEP/EOS removed.
pub fn respond(learner: &LMModel, context: &[u32], gen: &GenerationConfig) -> Result<Vec<u32>> {
    let seps = context.iter().filter(|&&t| t == Special::Sep.id()).count();
    let gen = GenerationConfig {
        temperature: 0.0,
        max_turns: Some(seps + 1),
        ..gen.clone()
    };
    let out = generate(learner, context, &gen)?;
    Ok(out
        .generated()
        .iter()
        .copied()
        .take_while(|&t| t != Special::Sep.id() && t != Special::Eos.id())
        .collect())
}

/// Every turn position `i >= 1` (0-based) of every conversation: the learner
/// answers the gold context greedily and is compared with the gold turn.
pub fn evaluate_learner(
    learner: &LMModel,
    val: &Corpus,
    vocab: &Vocab,
    table: &EmbeddingTable,
    gen: &GenerationConfig,
    weights: &RewardWeights,
) -> Result<MetricReport> {
    if table.len() != vocab.len() {
        return Err(MetricsError::TableMismatch {
            table: table.len(),
            vocab: vocab.len(),
        });
    }
    let max_seq = learner.config().max_seq;
    let mut jobs = Vec::new();
    for conv in &val.conversations {
        for i in 1..conv.turns.len() {
            let gold = vocab.encode_text(&conv.turns[i].text);
            let budget = max_seq.saturating_sub(gold.len() + 1);
            let context = response_context(&conv.turns[..i], &conv.turns[i], vocab, budget)
                .unwrap_or_else(|| vec![Special::Bos.id(), Special::speaker(conv.turns[i].speaker).id()]);
            jobs.push((context, gold));
        }
    }
    if jobs.is_empty() {
        return Err(MetricsError::NothingToEvaluate);
    }
    let samples = par::map(&jobs, |(context, gold)| -> Result<Sample> {
        let hyp = respond(learner, context, gen)?;
        Ok(score_one(&hyp, gold, table))
    });
    let samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;
    Ok(aggregate(&samples, weights))
}

#[cfg(test)]
mod tests;
