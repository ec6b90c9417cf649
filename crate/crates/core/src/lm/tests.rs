use proptest::prelude::*;

use super::*;
use crate::corpus::{decode_tokens, make_toy_corpus, Special, Vocab};
use crate::tensor::Tape;

fn tiny(vocab: usize) -> LMConfig {
    LMConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq: 32,
        dropout: 0.0,
        init_scale: 0.1,
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = LMModel::init(tiny(20), 3).unwrap();
    let b = LMModel::init(tiny(20), 3).unwrap();
    let c = LMModel::init(tiny(20), 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params()[0].data(), c.params()[0].data());
    let logits = a.forward(&[1, 7, 8, 3]).unwrap();
    assert_eq!(logits.len(), 4 * 20);
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn rejects_bad_configs_and_lengths() {
    assert!(LMModel::init(LMConfig { n_heads: 3, ..tiny(10) }, 0).is_err());
    assert!(LMModel::init(LMConfig { max_seq: 8, ..tiny(10) }, 0).is_err());
    let m = LMModel::init(tiny(10), 0).unwrap();
    assert!(matches!(m.forward(&[1; 33]), Err(LmError::TooLong { len: 33, max: 32 })));
    assert!(matches!(m.logprob_of(&[1, 2], 0), Err(LmError::Position { .. })));
}

#[test]
fn eval_forward_is_repeatable() {
    let m = LMModel::init(LMConfig { dropout: 0.3, ..tiny(12) }, 1).unwrap();
    assert_eq!(m.forward(&[1, 7, 9]).unwrap(), m.forward(&[1, 7, 9]).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn causal(ids in prop::collection::vec(0u32..12, 2..20), j_frac in 0.0f64..1.0, new_tok in 0u32..12) {
        let m = LMModel::init(tiny(12), 5).unwrap();
        let j = ((ids.len() as f64 * j_frac) as usize).min(ids.len() - 1);
        let mut other = ids.clone();
        other[j] = new_tok;
        let a = m.forward(&ids).unwrap();
        let b = m.forward(&other).unwrap();
        prop_assert_eq!(&a[..j * 12], &b[..j * 12]);
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let m = LMModel::init(LMConfig::with_vocab(100), 9).unwrap();
    let mut rng = crate::rng::RngStream::new(1);
    let batch: Vec<Example> = (0..4)
        .map(|_| {
            let ids: Vec<u32> = (0..40).map(|_| rng.below(100) as u32).collect();
            let mut loss_mask = vec![true; 40];
            loss_mask[0] = false;
            Example { ids, loss_mask }
        })
        .collect();
    let loss = nll_loss(&m, &batch).unwrap();
    assert!((loss - 100f64.ln()).abs() < 0.3, "{loss}");
}

#[test]
fn nll_single_position_equals_cross_entropy() {
    let m = LMModel::init(tiny(10), 2).unwrap();
    let ids = vec![1, 7, 8, 9, 3];
    let mut loss_mask = vec![false; 5];
    loss_mask[3] = true;
    let loss = nll_loss(&m, &[Example { ids: ids.clone(), loss_mask }]).unwrap();
    let logits = m.forward(&ids[..4]).unwrap();
    let lp = log_softmax(&logits[2 * 10..3 * 10]);
    assert!((loss + lp[9]).abs() < 1e-12);
    let masked = Example {
        ids: ids.clone(),
        loss_mask: vec![false; 5],
    };
    assert!(matches!(nll_loss(&m, &[masked]), Err(LmError::EmptyDataset(_))));
}

#[test]
fn logprob_sum_matches_nll() {
    let m = LMModel::init(tiny(10), 2).unwrap();
    let ids = vec![1, 7, 8, 9, 3, 7, 7];
    let lp = m.logprob_of(&ids, 2).unwrap();
    assert_eq!(lp.len(), 5);
    assert!(lp.iter().all(|&v| v <= 0.0));
    let mut loss_mask = vec![true; ids.len()];
    loss_mask[0] = false;
    loss_mask[1] = false;
    let nll = nll_loss(&m, &[Example { ids: ids.clone(), loss_mask }]).unwrap();
    assert!((lp.iter().sum::<f64>() + 5.0 * nll).abs() < 1e-9);
    assert_eq!(lp, m.logprob_of(&ids, 2).unwrap());
}

#[test]
fn weight_tying_shares_storage() {
    let mut m = LMModel::init(tiny(10), 2).unwrap();
    let ids = [1u32, 8];
    let before = m.forward(&ids).unwrap();
    // bumping the embedding row of token 9 moves only output logit 9 at the
    // last position (token 9 is not in the input)
    let d = m.config().d_model;
    for v in &mut m.params_mut()[0].data_mut()[9 * d..10 * d] {
        *v += 0.5;
    }
    let after = m.forward(&ids).unwrap();
    for k in 0..10 {
        if k == 9 {
            assert_ne!(before[10 + k], after[10 + k]);
        } else {
            assert_eq!(before[10 + k], after[10 + k]);
        }
    }
}

#[test]
fn decoder_matches_full_forward() {
    let m = LMModel::init(tiny(12), 8).unwrap();
    let ids = [1u32, 4, 9, 10, 3, 5, 11];
    let full = m.forward(&ids).unwrap();
    let mut dec = Decoder::new(&m);
    for (i, &t) in ids.iter().enumerate() {
        let (_, logits) = dec.step(t).unwrap();
        assert_eq!(logits, full[i * 12..(i + 1) * 12].to_vec(), "position {i}");
    }
}

#[test]
fn lr_zero_leaves_parameters() {
    let c = make_toy_corpus(4, 1);
    let v = Vocab::build(&c, 200, 1).unwrap();
    let mut m = LMModel::init(LMConfig { max_seq: 128, ..tiny(v.len()) }, 0).unwrap();
    let ds = lm_dataset_from(&c, &v, 128).examples;
    let before = m.clone();
    let hyper = TrainHyper {
        lr: 0.0,
        steps: 5,
        batch_size: 2,
        ..TrainHyper::default()
    };
    let curve = train_supervised(&mut m, &ds, &hyper).unwrap();
    assert_eq!(curve.len(), 5);
    for (a, b) in m.params().iter().zip(before.params()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn memorizes_a_few_sequences() {
    let seqs: Vec<Vec<u32>> = vec![vec![1, 7, 8, 9, 2], vec![1, 9, 8, 7, 2], vec![1, 10, 10, 11, 2], vec![1, 11, 7, 10, 2]];
    // first token after BOS is ambiguous across sequences; train on the rest
    let ds: Vec<Example> = seqs
        .into_iter()
        .map(|ids| {
            let mut loss_mask = vec![true; ids.len()];
            loss_mask[0] = false;
            loss_mask[1] = false;
            Example { ids, loss_mask }
        })
        .collect();
    let mut m = LMModel::init(tiny(12), 4).unwrap();
    let start = nll_loss(&m, &ds).unwrap();
    let hyper = TrainHyper {
        lr: 1e-2,
        steps: 300,
        batch_size: 4,
        ..TrainHyper::default()
    };
    let curve = train_supervised(&mut m, &ds, &hyper).unwrap();
    assert!(curve.iter().all(|v| v.is_finite()));
    let end = nll_loss(&m, &ds).unwrap();
    assert!(end < 0.05 && end < start, "{start} -> {end}");
}

#[test]
fn early_stop_prefix_matches_full_run() {
    let ds = vec![Example {
        ids: vec![1, 7, 8, 9, 2],
        loss_mask: vec![false, true, true, true, true],
    }];
    let hyper = TrainHyper {
        lr: 1e-2,
        steps: 40,
        batch_size: 1,
        ..TrainHyper::default()
    };
    let mut full = LMModel::init(tiny(12), 1).unwrap();
    let full_curve = train_supervised(&mut full, &ds, &hyper).unwrap();
    let mut checks = 0;
    let mut early = LMModel::init(tiny(12), 1).unwrap();
    let curve = train_supervised_until(&mut early, &ds, &hyper, 10, |_| {
        checks += 1;
        Ok(checks == 2)
    })
    .unwrap();
    assert_eq!(curve.len(), 20);
    assert_eq!(curve[..], full_curve[..20]);
}

#[test]
fn training_is_deterministic() {
    let ds = vec![Example {
        ids: vec![1, 7, 8, 2],
        loss_mask: vec![false, true, true, true],
    }];
    let hyper = TrainHyper {
        steps: 3,
        batch_size: 2,
        ..TrainHyper::default()
    };
    let mut a = LMModel::init(LMConfig { dropout: 0.2, ..tiny(10) }, 1).unwrap();
    let mut b = a.clone();
    assert_eq!(train_supervised(&mut a, &ds, &hyper).unwrap(), train_supervised(&mut b, &ds, &hyper).unwrap());
    assert_eq!(a, b);
}

#[test]
fn greedy_generation_is_deterministic() {
    let m = LMModel::init(tiny(12), 6).unwrap();
    let gen = GenerationConfig::greedy(20);
    let prefix = [Special::Bos.id(), Special::SpkA.id(), 9, Special::Sep.id()];
    let a = generate(&m, &prefix, &gen).unwrap();
    let b = generate(&m, &prefix, &GenerationConfig { rng_seed: 99, ..gen }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.prompt_len, 4);
    assert_eq!(a.logprobs.len(), a.generated().len());
}

#[test]
fn grammar_output_always_alternates() {
    let c = make_toy_corpus(3, 2);
    let v = Vocab::build(&c, 200, 1).unwrap();
    let m = LMModel::init(LMConfig { max_seq: 64, ..tiny(v.len()) }, 7).unwrap();
    let prefix = [Special::Bos.id(), Special::SpkA.id(), v.id("music"), Special::Sep.id()];
    for seed in 0..20 {
        let gen = GenerationConfig {
            max_new_tokens: 50,
            temperature: 1.5,
            top_k: 0,
            rng_seed: seed,
            ..GenerationConfig::default()
        };
        let out = generate(&m, &prefix, &gen).unwrap();
        let ids = &out.ids;
        for w in ids.windows(2) {
            if w[0] == Special::Sep.id() {
                assert!(w[1] == Special::SpkA.id() || w[1] == Special::SpkB.id());
            }
        }
        for (k, &f) in out.forced.iter().enumerate() {
            assert_eq!(f, ids[out.prompt_len - 1 + k] == Special::Sep.id());
            if f {
                assert_eq!(out.logprobs[k], 0.0);
            }
        }
        // a lone prompt turn is a truncated prefix of a valid conversation
        let conv = decode_tokens(ids, &v).unwrap();
        assert!(conv.turns.windows(2).all(|w| w[0].speaker != w[1].speaker));
        assert!(conv.turns.iter().all(|t| !t.text.trim().is_empty()));
    }
}

#[test]
fn recorded_logprobs_match_rescoring() {
    let m = LMModel::init(tiny(12), 6).unwrap();
    let prefix = [Special::Bos.id(), Special::SpkA.id(), 9];
    for seed in 0..5 {
        let gen = GenerationConfig {
            max_new_tokens: 25,
            temperature: 1.0,
            top_k: 0,
            rng_seed: seed,
            enforce_dialogue_grammar: false,
            max_turns: None,
        };
        let out = generate(&m, &prefix, &gen).unwrap();
        let lp = m.logprob_of(&out.ids, out.prompt_len).unwrap();
        for (a, b) in lp.iter().zip(&out.logprobs) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let m = LMModel::init(tiny(12), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(m.forward(&[1, 5, 6]).unwrap(), back.forward(&[1, 5, 6]).unwrap());
    assert_eq!(back, m);

    let bytes = checkpoint_bytes(&m);
    assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 9]), Err(LmError::Checksum)));

    // rewrite the header claiming a larger vocabulary than the weights hold
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    header["config"]["vocab_size"] = 13.into();
    let json = serde_json::to_vec(&header).unwrap();
    let mut forged = bytes[..8].to_vec();
    forged.extend((json.len() as u64).to_le_bytes());
    forged.extend(json);
    forged.extend(&bytes[16 + hlen..]);
    match checkpoint_from_bytes(&forged) {
        Err(LmError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "tok_emb"),
        other => panic!("{other:?}"),
    }
    assert!(checkpoint_from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn tape_and_decoder_hidden_agree() {
    let m = LMModel::init(tiny(12), 8).unwrap();
    let ids = [1u32, 4, 9];
    let mut tape = Tape::new();
    let fv = m.forward_tape(&mut tape, &ids, None).unwrap();
    let hidden = tape.value(fv.hidden).to_vec();
    let mut dec = Decoder::new(&m);
    let mut last = Vec::new();
    for &t in &ids {
        last = dec.step(t).unwrap().0;
    }
    assert_eq!(last, hidden[2 * 16..].to_vec());
}
