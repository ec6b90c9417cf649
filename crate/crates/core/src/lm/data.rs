use serde::{Deserialize, Serialize};

use crate::corpus::{encode_conversation, encode_turns, Corpus, Special, Turn, Vocab};

/// One training sequence. `loss_mask[j]` marks `ids[j]` as a prediction
/// target (predicted from position `j - 1`); `loss_mask[0]` is always false.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    pub fn targets(&self) -> usize {
        self.loss_mask.iter().zip(&self.ids).filter(|(&m, &t)| m && t != Special::Pad.id()).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearnerDataset {
    pub examples: Vec<Example>,
    /// Turn positions that could not fit `max_seq` even with one context turn.
    pub dropped: usize,
}

/// `BOS` + as many trailing `history` turns as fit in `budget` ids + the
/// speaker token of the next turn. Returns `None` when not even the last
/// history turn fits.
pub fn response_context(history: &[Turn], next: &Turn, vocab: &Vocab, budget: usize) -> Option<Vec<u32>> {
    let mut kept: Vec<Vec<u32>> = Vec::new();
    let mut used = 2; // BOS and the speaker token
    for t in history.iter().rev() {
        let enc = encode_turns(std::slice::from_ref(t), vocab);
        if used + enc.len() > budget {
            break;
        }
        used += enc.len();
        kept.push(enc);
    }
    if kept.is_empty() {
        return None;
    }
    let mut ids = vec![Special::Bos.id()];
    for enc in kept.iter().rev() {
        ids.extend(enc);
    }
    ids.push(Special::speaker(next.speaker).id());
    Some(ids)
}

/// One example per turn position `i >= 1` (0-based) of every conversation:
/// context = preceding turns truncated from the left, target = turn `i`
/// followed by SEP. Only the target span is in the loss.
pub fn learner_dataset_from(corpus: &Corpus, vocab: &Vocab, max_seq: usize) -> LearnerDataset {
    let mut out = LearnerDataset::default();
    for conv in &corpus.conversations {
        for i in 1..conv.turns.len() {
            let mut target = vocab.encode_text(&conv.turns[i].text);
            target.push(Special::Sep.id());
            let budget = max_seq.saturating_sub(target.len());
            match response_context(&conv.turns[..i], &conv.turns[i], vocab, budget) {
                Some(ctx) => {
                    let mut loss_mask = vec![false; ctx.len()];
                    loss_mask.extend(std::iter::repeat_n(true, target.len()));
                    let mut ids = ctx;
                    ids.extend(target);
                    out.examples.push(Example { ids, loss_mask });
                }
                None => out.dropped += 1,
            }
        }
    }
    out
}

/// Whole conversations as plain language-model sequences: every position
/// after BOS is a target.
pub fn lm_dataset_from(corpus: &Corpus, vocab: &Vocab, max_seq: usize) -> LearnerDataset {
    let mut out = LearnerDataset::default();
    for conv in &corpus.conversations {
        match encode_conversation(conv, vocab, max_seq) {
            Ok(ids) => {
                let mut loss_mask = vec![true; ids.len()];
                loss_mask[0] = false;
                out.examples.push(Example { ids, loss_mask });
            }
            Err(_) => out.dropped += 1,
        }
    }
    out
}
