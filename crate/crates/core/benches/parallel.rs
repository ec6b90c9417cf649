//! Rayon map vs. the sequential fallback on the two hot loops: per-example
//! loss evaluation and rollout generation. Run with `--features parallel`
//! (the default) and several threads to see a difference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gcn_forge::corpus::{make_toy_corpus, Vocab};
use gcn_forge::lm::{generate_with, learner_dataset_from, GenerationConfig, LMConfig, LMModel};
use gcn_forge::par;
use gcn_forge::rng::RngStream;

fn setup() -> (LMModel, Vec<Vec<u32>>) {
    let corpus = make_toy_corpus(64, 1);
    let vocab = Vocab::build(&corpus, 5000, 1).expect("vocab");
    let config = LMConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq: 64,
        dropout: 0.0,
        init_scale: 0.02,
    };
    let model = LMModel::init(config.clone(), 0).expect("init");
    let seqs = learner_dataset_from(&corpus, &vocab, config.max_seq)
        .examples
        .into_iter()
        .take(64)
        .map(|e| e.ids)
        .collect();
    (model, seqs)
}

fn bench(c: &mut Criterion) {
    let (model, seqs) = setup();
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("map", seqs.len()), |b| b.iter(|| par::map(&seqs, |s| model.forward(s).expect("forward"))));
    g.bench_function(BenchmarkId::new("map_seq", seqs.len()), |b| b.iter(|| par::map_seq(&seqs, |s| model.forward(s).expect("forward"))));
    g.finish();

    let prompts: Vec<(u64, Vec<u32>)> = seqs.iter().take(16).enumerate().map(|(k, s)| (k as u64, s[..s.len().min(8)].to_vec())).collect();
    let gen = GenerationConfig {
        max_new_tokens: 24,
        temperature: 1.0,
        top_k: 0,
        rng_seed: 0,
        enforce_dialogue_grammar: false,
        max_turns: None,
    };
    let root = RngStream::new(9);
    let rollout = |(k, p): &(u64, Vec<u32>)| generate_with(&model, p, &gen, &mut root.split(*k)).expect("generate");
    let mut g = c.benchmark_group("rollouts");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("map", prompts.len()), |b| b.iter(|| par::map(&prompts, rollout)));
    g.bench_function(BenchmarkId::new("map_seq", prompts.len()), |b| b.iter(|| par::map_seq(&prompts, rollout)));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
