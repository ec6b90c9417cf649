use super::*;
use crate::corpus::{load_jsonl, make_toy_corpus, Conversation};
use crate::lm::checkpoint_bytes;

fn tiny_lm(max_seq: usize) -> LMConfig {
    LMConfig {
        vocab_size: 0,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq,
        dropout: 0.0,
        init_scale: 0.02,
    }
}

fn tiny_config() -> GCNConfig {
    let mut c = GCNConfig {
        seed_fraction: 0.25,
        embedding_dim: 8,
        conversations_per_iteration: 4,
        final_conversations: 4,
        generator: tiny_lm(112),
        learner: tiny_lm(48),
        eval_max_new_tokens: 12,
        max_iterations: 2,
        rng_seed: 5,
        ..GCNConfig::default()
    };
    c.generator_pretrain.steps = 30;
    c.generator_pretrain.batch_size = 4;
    c.learner_hyper.steps = 15;
    c.learner_hyper.batch_size = 4;
    c.ppo.ppo_epochs = 1;
    c.ppo.minibatch_size = 4;
    c.gen.max_new_tokens = 48;
    c
}

fn prepared() -> Prepared {
    prepare(&make_toy_corpus(60, 3), &tiny_config()).unwrap()
}

#[test]
fn prepare_partitions_the_corpus() {
    let corpus = make_toy_corpus(60, 3);
    let p = prepare(&corpus, &tiny_config()).unwrap();
    let sizes = [p.seed_train.len(), p.seed_val.len(), p.rest.len(), p.test.len()];
    assert_eq!(sizes.iter().sum::<usize>(), 60);
    assert_eq!(p.seed_train.len() + p.seed_val.len(), 15);
    assert_eq!(p.seed_val.len(), 3);
    assert_eq!(p.test.len(), 5);
    let mut ids: Vec<&str> = ["seed_train", "seed_val", "rest", "test"]
        .iter()
        .flat_map(|n| p.split(n).unwrap().conversations.iter().map(|c| c.id.as_str()))
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 60);
    assert_eq!(p.table.len(), p.vocab.len());

    let dir = tempfile::tempdir().unwrap();
    p.write(dir.path()).unwrap();
    let back = Prepared::read(dir.path()).unwrap();
    assert_eq!(back.seed_train, p.seed_train);
    assert_eq!(back.test, p.test);
    assert_eq!(back.table, p.table);
}

#[test]
fn sampling_without_then_with_replacement() {
    let mut rng = RngStream::new(1);
    let mut a = sample_indices(10, 10, &mut rng);
    a.sort();
    assert_eq!(a, (0..10).collect::<Vec<_>>());
    let b = sample_indices(3, 20, &mut rng);
    assert_eq!(b.len(), 20);
    assert!(b.iter().all(|&i| i < 3));
}

#[test]
fn synthetic_set_keeps_prompts_and_round_trips() {
    let p = prepared();
    let c = tiny_config();
    let generator = pretrain_generator(&p.seed_train, &p.vocab, &c).unwrap();
    let prompts = usable_prompts(&p.seed_train, &p.vocab, generator.config().max_seq);
    assert!(!prompts.is_empty());
    let vh = ValueHead::new(generator.config().d_model);
    let (dprime, batch) =
        generate_dataset(&generator, &vh, &generator, &prompts, &p.vocab, 6, &c.gen, &RngStream::new(2), "syn-t").unwrap();
    assert_eq!(batch.len(), 6);
    assert!(dprime.len() <= 6);
    for conv in &dprime.conversations {
        assert!(conv.synthetic);
        let src = conv.source_prompt_id.as_deref().unwrap();
        let seed = p.seed_train.conversations.iter().find(|s| s.id == src).unwrap();
        assert_eq!(conv.turns[..3], seed.turns[..3]);
        assert!(conv.turns.len() > 3 && conv.turns.len() <= seed.turns.len());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    dprime.write_jsonl(&path).unwrap();
    assert_eq!(load_jsonl(&path).unwrap().conversations, dprime.conversations);
}

#[test]
fn empty_synthetic_set_scores_zero() {
    let p = prepared();
    let empty = Corpus::new("e", Vec::new()).unwrap();
    let r = dataset_reward(&empty, &p.seed_data(), &tiny_config()).unwrap();
    assert_eq!(r.combined_reward, 0.0);
    let positions: usize = p.seed_val.conversations.iter().map(|c| c.turns.len() - 1).sum();
    assert_eq!(r.n_samples, positions);
}

fn record(reward: f64) -> IterationRecord {
    IterationRecord {
        iteration: 0,
        dataset_size: 0,
        reward,
        report: MetricReport::zero(0),
        mean_kl: 0.0,
        ppo: None,
        wall_seconds: 0.0,
    }
}

#[test]
fn stopping_rule() {
    let h: Vec<_> = [0.1, 0.2, 0.2005, 0.2009].iter().map(|&r| record(r)).collect();
    assert!(!converged(&h[..3], 1e-3, 2));
    assert!(converged(&h, 1e-3, 2));
    assert!(!converged(&h, 1e-3, 3));
    assert!(converged(&h, f64::INFINITY, 3));
    assert!(!converged(&h[..3], f64::INFINITY, 3));
}

#[test]
fn infinite_tolerance_stops_after_patience_plus_one() {
    let p = prepared();
    let c = GCNConfig {
        tolerance: f64::INFINITY,
        patience: 2,
        max_iterations: 10,
        ..tiny_config()
    };
    let g = pretrain_generator(&p.seed_train, &p.vocab, &c).unwrap();
    let run = run_gcn(&c, p.seed_data(), g, false, &mut ()).unwrap();
    assert_eq!(run.history.len(), 3);
}

#[test]
fn copy_rate_counts_exact_reproductions() {
    let p = prepared();
    let mut copy = p.seed_train.conversations[0].clone();
    copy.id = "syn-x".into();
    let mut other = copy.clone();
    other.id = "syn-y".into();
    other.turns[1].text.push_str(" extra");
    let syn = Corpus::new("s", vec![copy, other]).unwrap();
    assert_eq!(copy_rate(&syn, &p.seed_train, &p.vocab), 0.5);
    assert_eq!(copy_rate(&Corpus::new("e", Vec::<Conversation>::new()).unwrap(), &p.seed_train, &p.vocab), 0.0);
}

fn run_into(dir: &std::path::Path, apply_ppo: bool) -> GCNRun {
    let p = prepared();
    let c = tiny_config();
    let g = pretrain_generator(&p.seed_train, &p.vocab, &c).unwrap();
    let mut rd = RunDir::create(dir).unwrap();
    rd.write_config(&c).unwrap();
    let run = run_gcn(&c, p.seed_data(), g, apply_ppo, &mut rd).unwrap();
    rd.write_final(&run, "seed_val").unwrap();
    run
}

#[test]
fn run_records_are_consistent_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_into(dir.path(), true);
    assert_eq!(run.history.len(), 2);
    for (k, rec) in run.history.iter().enumerate() {
        assert_eq!(rec.iteration, k);
        assert_eq!(rec.reward, rec.report.combined_reward);
        assert!(rec.ppo.is_some());
    }
    let best = run.history.iter().map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.best_reward(), best);

    let rd = RunDir::open(dir.path());
    let history = rd.read_history().unwrap();
    assert_eq!(history.len(), run.history.len());
    for (a, b) in history.iter().zip(&run.history) {
        assert_eq!(a.reward, b.reward);
        assert_eq!(a.report, b.report);
    }
    let summary = rd.read_final().unwrap();
    assert_eq!(summary.best_iteration, run.best_iteration);
    assert_eq!(summary.final_report, run.final_report);
    assert!(rd.final_learner_checkpoint().exists());
    assert!(dir.path().join(PPO_LOG_FILE).exists());

    // the stored generator of the best iteration reproduces its reward
    let g = crate::lm::load_checkpoint(&rd.generator_checkpoint(run.best_iteration)).unwrap();
    assert_eq!(checkpoint_bytes(&g), checkpoint_bytes(&run.best_generator));
    let p = prepared();
    let replayed = replay_reward(&g, p.seed_data(), &tiny_config(), run.best_iteration).unwrap();
    assert!((replayed - run.best_reward()).abs() <= 1e-9, "{replayed} vs {}", run.best_reward());
}

#[test]
fn runs_are_reproducible_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_into(a.path(), true);
    run_into(b.path(), true);
    for rel in [HISTORY_FILE, CONFIG_FILE, FINAL_FILE, DPRIME_FILE, "checkpoints/gen_iter_1.ckpt", "checkpoints/final_learner.ckpt"] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert!(x == y, "{rel} differs");
    }
}

#[test]
fn without_policy_updates_the_generator_is_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_into(dir.path(), false);
    assert!(run.history.iter().all(|r| r.ppo.is_none()));
    let x = std::fs::read(dir.path().join("checkpoints/gen_iter_0.ckpt")).unwrap();
    let y = std::fs::read(dir.path().join("checkpoints/gen_iter_1.ckpt")).unwrap();
    assert_eq!(x, y);
    assert!(!dir.path().join(PPO_LOG_FILE).exists());
}

#[test]
fn baselines_cover_all_conditions() {
    let p = prepared();
    let dir = tempfile::tempdir().unwrap();
    let res = run_baselines(&p, &tiny_config(), Some(dir.path())).unwrap();
    assert_eq!(res.rows.len(), 4);
    for c in Condition::ALL {
        let r = res.row(c);
        assert!((0.0..=1.0).contains(&r.report.combined_reward));
    }
    assert_eq!(res.row(Condition::SeedOnly).train_conversations, p.seed_train.len());
    assert_eq!(
        res.row(Condition::FullData).train_conversations,
        p.seed_train.len() + p.rest.len()
    );
    let csv = std::fs::read_to_string(dir.path().join("baselines.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("condition,bleu,rouge1,rouge2,rougeL,embed,combined"));
    assert!(dir.path().join("gcn").join(HISTORY_FILE).exists());
    assert!(dir.path().join("gcn_no_rl").join(FINAL_FILE).exists());
}
