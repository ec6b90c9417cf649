//! Tape-free incremental decoding with a per-layer key/value cache.
//!
//! The arithmetic mirrors [`LMModel::forward_tape`] operation for operation,
//! so cached decoding reproduces full-sequence logits exactly.

use serde::{Deserialize, Serialize};

use super::model::{slot, TOK_EMB, POS_EMB};
use super::{GenerationConfig, LMModel, LmError, Result};
use crate::corpus::Special;
use crate::rng::RngStream;
use crate::tensor::kernels::{dot, gelu, gemm_acc, gemm_nt_acc, layer_norm_row, softmax_row};
use crate::tensor::sample_categorical;

/// Running decoder state: cached keys/values of every processed position.
pub struct Decoder<'m> {
    model: &'m LMModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn linear(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_out];
    gemm_acc(x, w, &mut out, 1, n_in, n_out);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    out
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m LMModel) -> Self {
        let n = model.config().n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one token; returns `(final hidden row, logits row)` for the
    /// next-token distribution.
    pub fn step(&mut self, token: u32) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.model;
        let c = m.config();
        if self.len >= c.max_seq {
            return Err(LmError::TooLong {
                len: self.len + 1,
                max: c.max_seq,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(LmError::InvalidConfig(format!("token {token} outside vocabulary")));
        }
        let (d, dh) = (c.d_model, c.head_dim());
        let pos = self.len;
        let tok = &m.params()[TOK_EMB].data()[token as usize * d..(token as usize + 1) * d];
        let pe = &m.params()[POS_EMB].data()[pos * d..(pos + 1) * d];
        let mut h: Vec<f64> = tok.iter().zip(pe).map(|(a, b)| a + b).collect();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut x = vec![0.0; d];
        for l in 0..c.n_layers {
            let p = |w: usize| m.layer_param(l, w).data();
            layer_norm_row(&h, p(slot::LN1_G), p(slot::LN1_B), &mut x);
            let qkv = linear(&x, p(slot::W_QKV), p(slot::B_QKV), d, 3 * d);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let t = pos + 1;
            let mut o = vec![0.0; d];
            for hd in 0..c.n_heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let k = &self.keys[l][j * d + hd * dh..j * d + (hd + 1) * dh];
                        let mut s = [0.0];
                        gemm_nt_acc(q, k, &mut s, 1, dh, 1);
                        s[0] * inv_sqrt
                    })
                    .collect();
                softmax_row(&mut scores);
                let out = &mut o[hd * dh..(hd + 1) * dh];
                for (j, &a) in scores.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let v = &self.values[l][j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (oi, vi) in out.iter_mut().zip(v) {
                        *oi += a * vi;
                    }
                }
            }
            let proj = linear(&o, p(slot::W_O), p(slot::B_O), d, d);
            for (hi, v) in h.iter_mut().zip(&proj) {
                *hi += v;
            }
            layer_norm_row(&h, p(slot::LN2_G), p(slot::LN2_B), &mut x);
            let mut f = linear(&x, p(slot::W_FC), p(slot::B_FC), d, 4 * d);
            for v in f.iter_mut() {
                *v = gelu(*v);
            }
            let f = linear(&f, p(slot::W_PROJ), p(slot::B_PROJ), 4 * d, d);
            for (hi, v) in h.iter_mut().zip(&f) {
                *hi += v;
            }
        }
        let (g, b) = m.final_norm();
        let mut hidden = vec![0.0; d];
        layer_norm_row(&h, g.data(), b.data(), &mut hidden);
        let emb = m.params()[TOK_EMB].data();
        let logits = (0..c.vocab_size).map(|v| dot(&hidden, &emb[v * d..(v + 1) * d])).collect();
        self.len += 1;
        Ok((hidden, logits))
    }
}

/// A sampled continuation. `ids` holds the prefix followed by the generated
/// tokens; `logprobs` and `forced` align with the generated part only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTokens {
    pub ids: Vec<u32>,
    pub prompt_len: usize,
    pub logprobs: Vec<f64>,
    pub forced: Vec<bool>,
}

impl ScoredTokens {
    pub fn generated(&self) -> &[u32] {
        &self.ids[self.prompt_len..]
    }
}

/// Grammar state while decoding a dialogue.
#[derive(Clone, Copy, Debug)]
enum GrammarState {
    /// Previous token closed a turn (or the sequence is empty after BOS):
    /// the next token must be this speaker.
    TurnStart(Special),
    /// Inside a turn holding `words` tokens so far.
    InTurn { speaker: Special, words: usize },
}

fn grammar_after_prefix(prefix: &[u32]) -> GrammarState {
    prefix
        .iter()
        .fold(GrammarState::TurnStart(Special::SpkA), |s, &t| advance(s, t))
}

fn advance(state: GrammarState, token: u32) -> GrammarState {
    let other = |s: Special| if s == Special::SpkA { Special::SpkB } else { Special::SpkA };
    match state {
        GrammarState::TurnStart(next) => {
            if token == Special::SpkA.id() {
                GrammarState::InTurn { speaker: Special::SpkA, words: 0 }
            } else if token == Special::SpkB.id() {
                GrammarState::InTurn { speaker: Special::SpkB, words: 0 }
            } else {
                GrammarState::TurnStart(next)
            }
        }
        GrammarState::InTurn { speaker, words } => {
            if token == Special::Sep.id() {
                GrammarState::TurnStart(other(speaker))
            } else {
                GrammarState::InTurn { speaker, words: words + 1 }
            }
        }
    }
}

/// Applies temperature, grammar masking and top-k to raw logits. Returns the
/// sampling distribution (all zeros except candidates).
fn sampling_distribution(logits: &[f64], gen: &GenerationConfig, allowed: &dyn Fn(u32) -> bool) -> Vec<f64> {
    let n = logits.len();
    let mut cand: Vec<usize> = (0..n).filter(|&i| allowed(i as u32)).collect();
    if gen.top_k > 0 && gen.top_k < cand.len() {
        cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        cand.truncate(gen.top_k);
        cand.sort_unstable();
    }
    let mut scaled: Vec<f64> = cand.iter().map(|&i| logits[i] / gen.temperature).collect();
    softmax_row(&mut scaled);
    let mut probs = vec![0.0; n];
    for (&i, p) in cand.iter().zip(scaled) {
        probs[i] = p;
    }
    probs
}

fn argmax_allowed(logits: &[f64], allowed: &dyn Fn(u32) -> bool) -> u32 {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if allowed(i as u32) && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as u32).unwrap_or(Special::Eos.id())
}

/// Samples a continuation of `prefix` with the stream seeded from
/// `gen.rng_seed`.
pub fn generate(model: &LMModel, prefix: &[u32], gen: &GenerationConfig) -> Result<ScoredTokens> {
    let mut rng = RngStream::new(gen.rng_seed);
    generate_with(model, prefix, gen, &mut rng)
}

/// Like [`generate`] with an explicit random stream.
///
/// Stops at EOS, after `max_new_tokens`, at `max_seq`, or once `max_turns`
/// complete turns exist. With grammar enforcement the token after each SEP is
/// forced to the alternating speaker (logprob 0, flagged), and within a turn
/// only words, SEP (after at least one word) and EOS may be drawn.
pub fn generate_with(model: &LMModel, prefix: &[u32], gen: &GenerationConfig, rng: &mut RngStream) -> Result<ScoredTokens> {
    gen.validate()?;
    let max_seq = model.config().max_seq;
    if prefix.is_empty() || prefix.len() >= max_seq {
        return Err(LmError::TooLong {
            len: prefix.len(),
            max: max_seq,
        });
    }
    let vocab = model.config().vocab_size as u32;
    let mut dec = Decoder::new(model);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = dec.step(t)?.1;
    }
    let mut ids = prefix.to_vec();
    let mut logprobs = Vec::new();
    let mut forced = Vec::new();
    let mut state = grammar_after_prefix(prefix);
    let mut turns = prefix.iter().filter(|&&t| t == Special::Sep.id()).count();
    let done = |turns: usize| gen.max_turns.is_some_and(|m| turns >= m);

    while logprobs.len() < gen.max_new_tokens && ids.len() < max_seq && !done(turns) {
        let (token, lp, was_forced) = match (gen.enforce_dialogue_grammar, state) {
            (true, GrammarState::TurnStart(spk)) => (spk.id(), 0.0, true),
            (grammar, _) => {
                let words = match state {
                    GrammarState::InTurn { words, .. } => words,
                    GrammarState::TurnStart(_) => 0,
                };
                let allowed = |t: u32| -> bool {
                    if !grammar {
                        return t < vocab;
                    }
                    t == Special::Eos.id()
                        || (t == Special::Sep.id() && words > 0)
                        || (t >= Special::Unk.id() && t < vocab)
                };
                if gen.temperature == 0.0 {
                    (argmax_allowed(&logits, &allowed), 0.0, false)
                } else {
                    let probs = sampling_distribution(&logits, gen, &allowed);
                    let t = sample_categorical(&probs, rng)?;
                    (t as u32, probs[t].ln(), false)
                }
            }
        };
        ids.push(token);
        logprobs.push(lp);
        forced.push(was_forced);
        state = advance(state, token);
        if token == Special::Sep.id() {
            turns += 1;
        }
        if token == Special::Eos.id() || ids.len() >= max_seq || done(turns) || logprobs.len() >= gen.max_new_tokens {
            break;
        }
        logits = dec.step(token)?.1;
    }
    Ok(ScoredTokens {
        ids,
        prompt_len: prefix.len(),
        logprobs,
        forced,
    })
}
