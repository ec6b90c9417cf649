//! BLEU and ROUGE over token-id sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Precision / recall / harmonic-mean triple.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    pub const ONE: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub(crate) fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Σ over hyp n-grams of min(count in hyp, count in ref).
fn clipped_matches(hyp: &[u32], reference: &[u32], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(hyp, n)
        .into_iter()
        .map(|(g, c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothing {
    None,
    /// Add one to numerator and denominator of every order above 1.
    AddOne,
}

/// Sufficient statistics for BLEU; summing them over sentence pairs gives
/// corpus-level BLEU.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn zero(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    pub fn of(hyp: &[u32], reference: &[u32], max_n: usize) -> Self {
        Self {
            matches: (1..=max_n).map(|n| clipped_matches(hyp, reference, n)).collect(),
            totals: (1..=max_n).map(|n| (hyp.len() + 1).saturating_sub(n)).collect(),
            hyp_len: hyp.len(),
            ref_len: reference.len(),
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of the (smoothed) clipped precisions times the brevity
    /// penalty `min(1, exp(1 - ref/hyp))`. Zero for an empty hypothesis.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 || self.matches.is_empty() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (k, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let p = match smoothing {
                Smoothing::AddOne if k > 0 => (m + 1) as f64 / (t + 1) as f64,
                _ => ratio(m, t),
            };
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
        }
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp().min(1.0);
        (bp * (log_sum / self.matches.len() as f64).exp()).clamp(0.0, 1.0)
    }
}

/// Sentence BLEU.
pub fn bleu(hyp: &[u32], reference: &[u32], max_n: usize, smoothing: Smoothing) -> f64 {
    BleuStats::of(hyp, reference, max_n).score(smoothing)
}

/// ROUGE-N with clipped overlap. When neither side has an n-gram of this
/// order (both shorter than `n`) and the hypothesis is non-empty the pair
/// counts as full agreement.
pub fn rouge_n(hyp: &[u32], reference: &[u32], n: usize) -> Prf {
    if hyp.is_empty() {
        return Prf::default();
    }
    let h_total = (hyp.len() + 1).saturating_sub(n);
    let r_total = (reference.len() + 1).saturating_sub(n);
    if h_total == 0 && r_total == 0 {
        return Prf::ONE;
    }
    let m = clipped_matches(hyp, reference, n);
    Prf::from_pr(ratio(m, h_total), ratio(m, r_total))
}

pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(hyp: &[u32], reference: &[u32]) -> Prf {
    let l = lcs_len(hyp, reference);
    Prf::from_pr(ratio(l, hyp.len()), ratio(l, reference.len()))
}
