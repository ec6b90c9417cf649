use proptest::prelude::*;

use super::*;
use crate::corpus::{make_toy_corpus, Vocab};
use crate::lm::LMConfig;
use crate::rng::RngStream;

/// Direct n-gram enumeration: for every distinct hyp n-gram count its
/// occurrences on both sides by scanning.
fn brute_clipped(h: &[u32], r: &[u32], n: usize) -> (usize, usize) {
    if h.len() < n {
        return (0, 0);
    }
    let grams: Vec<&[u32]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
    let count = |s: &[u32], g: &[u32]| if s.len() < n { 0 } else { (0..=s.len() - n).filter(|&i| &s[i..i + n] == g).count() };
    let mut seen: Vec<&[u32]> = Vec::new();
    let mut m = 0;
    for g in &grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        m += count(h, g).min(count(r, g));
    }
    (m, grams.len())
}

fn brute_bleu(h: &[u32], r: &[u32], max_n: usize) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 1..=max_n {
        let (m, t) = brute_clipped(h, r, n);
        let p = if n == 1 {
            if t == 0 { 0.0 } else { m as f64 / t as f64 }
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        prod *= p;
    }
    let bp = if h.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / h.len() as f64).exp() };
    bp * prod.powf(1.0 / max_n as f64)
}

fn brute_lcs(a: &[u32], b: &[u32]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[test]
fn overlap_metrics_match_brute_force() {
    let mut rng = RngStream::new(2024);
    for _ in 0..300 {
        let hl = 1 + rng.below(12);
        let rl = 1 + rng.below(12);
        let alpha = 2 + rng.below(6) as u32;
        let h: Vec<u32> = (0..hl).map(|_| rng.below(alpha as usize) as u32).collect();
        let r: Vec<u32> = (0..rl).map(|_| rng.below(alpha as usize) as u32).collect();
        assert!((bleu(&h, &r, 4, Smoothing::AddOne) - brute_bleu(&h, &r, 4)).abs() < 1e-9);
        for n in 1..=2 {
            let (m, t) = brute_clipped(&h, &r, n);
            let rt = r.len().saturating_sub(n - 1);
            let got = rouge_n(&h, &r, n);
            if t == 0 && rt == 0 {
                assert_eq!(got, Prf::ONE);
                continue;
            }
            let p = if t == 0 { 0.0 } else { m as f64 / t as f64 };
            let rc = if rt == 0 { 0.0 } else { m as f64 / rt as f64 };
            assert!((got.f1 - f1(p, rc)).abs() < 1e-9);
        }
        let l = brute_lcs(&h, &r) as f64;
        let got = rouge_l(&h, &r);
        assert!((got.f1 - f1(l / h.len() as f64, l / r.len() as f64)).abs() < 1e-9);
    }
}

#[test]
fn combined_reward_examples() {
    let w = RewardWeights::default();
    assert!((combined_reward(1.0, 1.0, 1.0, &w) - 1.06).abs() < 1e-12);
    assert_eq!(combined_reward(0.0, 0.0, 0.0, &w), 0.0);
    assert!((combined_reward(0.5, 0.3, 0.8, &w) - 0.813).abs() < 1e-12);
}

proptest! {
    #[test]
    fn combined_reward_is_monotone(b in 0.0f64..1.0, r in 0.0f64..1.0, s in 0.0f64..1.0, d in 0.0f64..0.5) {
        let w = RewardWeights::default();
        let base = combined_reward(b, r, s, &w);
        prop_assert!(combined_reward(b + d, r, s, &w) >= base);
        prop_assert!(combined_reward(b, r + d, s, &w) >= base);
        prop_assert!(combined_reward(b, r, s + d, &w) >= base);
    }
}

#[test]
fn pair_scoring_bounds() {
    let c = make_toy_corpus(10, 1);
    let v = Vocab::build(&c, 300, 1).unwrap();
    let t = train_embeddings(&c, &v, 8, 2).unwrap();
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = c.conversations[0]
        .turns
        .iter()
        .map(|turn| {
            let ids = v.encode_text(&turn.text);
            (ids.clone(), ids)
        })
        .collect();
    let perfect = score_pairs(&pairs, &t, &RewardWeights::default());
    assert_eq!((perfect.bleu, perfect.rouge1_f, perfect.rouge2_f, perfect.rouge_l_f, perfect.embed_f), (1.0, 1.0, 1.0, 1.0, 1.0));
    assert!((perfect.combined_reward - 1.06).abs() < 1e-12);
    let empty: Vec<(Vec<u32>, Vec<u32>)> = pairs.iter().map(|(_, r)| (Vec::new(), r.clone())).collect();
    assert_eq!(score_pairs(&empty, &t, &RewardWeights::default()).combined_reward, 0.0);
}

fn eos_only_learner(vocab: usize) -> LMModel {
    let mut m = LMModel::init(
        LMConfig {
            d_model: 16,
            n_heads: 2,
            max_seq: 128,
            ..LMConfig::with_vocab(vocab)
        },
        1,
    )
    .unwrap();
    let n = m.params().len();
    let eos = Special::Eos.id() as usize;
    m.params_mut()[n - 2].data_mut().fill(0.0);
    m.params_mut()[n - 1].data_mut().fill(1.0);
    m.params_mut()[0].data_mut()[eos * 16..(eos + 1) * 16].fill(5.0);
    m
}

#[test]
fn evaluation_counts_and_degenerate_learner() {
    let c = make_toy_corpus(6, 4);
    let v = Vocab::build(&c, 300, 1).unwrap();
    let t = train_embeddings(&c, &v, 8, 2).unwrap();
    let expected: usize = c.conversations.iter().map(|x| x.turns.len() - 1).sum();
    let gen = GenerationConfig::greedy(20);
    let m = eos_only_learner(v.len());
    let report = evaluate_learner(&m, &c, &v, &t, &gen, &RewardWeights::default()).unwrap();
    assert_eq!(report.n_samples, expected);
    assert_eq!(report.combined_reward, 0.0);

    let random = LMModel::init(LMConfig { d_model: 16, n_heads: 2, max_seq: 128, ..LMConfig::with_vocab(v.len()) }, 3).unwrap();
    let a = evaluate_learner(&random, &c, &v, &t, &gen, &RewardWeights::default()).unwrap();
    let b = evaluate_learner(&random, &c, &v, &t, &gen, &RewardWeights::default()).unwrap();
    assert_eq!(a, b);
    for x in [a.bleu, a.rouge1_f, a.rouge2_f, a.rouge_l_f, a.embed_f] {
        assert!((0.0..=1.0).contains(&x));
    }
    let w = RewardWeights::default();
    assert_eq!(a.combined_reward, combined_reward(a.bleu, a.rouge1_f, a.embed_f, &w));

    let empty = Corpus::new("e", vec![]).unwrap();
    assert!(matches!(evaluate_learner(&m, &empty, &v, &t, &gen, &w), Err(MetricsError::NothingToEvaluate)));
}

#[test]
fn report_json_is_flat() {
    let r = MetricReport::zero(3);
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let obj = v.as_object().unwrap();
    assert_eq!(obj.len(), 7);
    assert!(obj.contains_key("rougeL_f"));
}
