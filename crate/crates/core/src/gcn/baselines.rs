use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval_generation, pretrain_generator, run_gcn, spawn_and_train_learner, GCNConfig, GCNRun, GcnError, IterationSink, Result, RunDir, SeedData};
use crate::corpus::{load_jsonl, sample_seed, split_train_val, Corpus, Vocab};
use crate::metrics::{evaluate_learner, train_embeddings, EmbeddingTable, MetricReport};

/// Splits, vocabulary and embedding table shared by every condition.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed_train: Corpus,
    pub seed_val: Corpus,
    /// Non-seed conversations outside the test split; the full-data
    /// baseline trains on these plus `seed_train`.
    pub rest: Corpus,
    pub test: Corpus,
    pub vocab: Vocab,
    pub table: EmbeddingTable,
}

const SPLITS: [&str; 4] = ["seed_train", "seed_val", "rest", "test"];

fn named(mut c: Corpus, name: &str) -> Corpus {
    c.name = name.to_string();
    c
}

/// Seed sample, seed train/validation split and a held-out test split of
/// the remainder. The vocabulary covers the whole corpus; embeddings are fit
/// on seed training data only.
pub fn prepare(corpus: &Corpus, config: &GCNConfig) -> Result<Prepared> {
    config.validate()?;
    let (seed, rest) = sample_seed(corpus, config.seed_fraction, config.rng_seed)?;
    let (seed_train, seed_val) = split_train_val(&seed, config.val_fraction, config.rng_seed)?;
    let (rest, test) = split_train_val(&rest, config.test_fraction, config.rng_seed)?;
    let vocab = Vocab::build(corpus, config.vocab_max_size, config.vocab_min_freq)?;
    let table = train_embeddings(&seed_train, &vocab, config.embedding_dim, config.embedding_window)?;
    Ok(Prepared {
        seed_train: named(seed_train, "seed_train"),
        seed_val: named(seed_val, "seed_val"),
        rest: named(rest, "rest"),
        test: named(test, "test"),
        vocab,
        table,
    })
}

impl Prepared {
    pub fn seed_data(&self) -> SeedData<'_> {
        SeedData {
            seed_train: &self.seed_train,
            seed_val: &self.seed_val,
            vocab: &self.vocab,
            table: &self.table,
        }
    }

    pub fn split(&self, name: &str) -> Option<&Corpus> {
        match name {
            "seed_train" => Some(&self.seed_train),
            "seed_val" => Some(&self.seed_val),
            "rest" => Some(&self.rest),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GcnError::Io(format!("{}: {e}", dir.display())))?;
        for name in SPLITS {
            self.split(name).expect("known split").write_jsonl(&dir.join(format!("{name}.jsonl")))?;
        }
        self.vocab.save(&dir.join("vocab.json"))?;
        self.table.save(&dir.join("embeddings.bin"))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let load = |name: &str| -> Result<Corpus> { Ok(named(load_jsonl(&dir.join(format!("{name}.jsonl")))?, name)) };
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let table = EmbeddingTable::load(&dir.join("embeddings.bin"))?;
        if table.len() != vocab.len() {
            return Err(GcnError::Config(format!(
                "embedding table has {} rows but the vocabulary has {} entries",
                table.len(),
                vocab.len()
            )));
        }
        Ok(Self {
            seed_train: load("seed_train")?,
            seed_val: load("seed_val")?,
            rest: load("rest")?,
            test: load("test")?,
            vocab,
            table,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    FullData,
    SeedOnly,
    Gcn,
    GcnNoRl,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::FullData, Condition::SeedOnly, Condition::Gcn, Condition::GcnNoRl];

    pub fn name(self) -> &'static str {
        match self {
            Condition::FullData => "full_data",
            Condition::SeedOnly => "seed_only",
            Condition::Gcn => "gcn",
            Condition::GcnNoRl => "gcn_no_rl",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub condition: Condition,
    pub train_conversations: usize,
    pub report: MetricReport,
}

pub struct BaselineResults {
    pub rows: Vec<BaselineRow>,
    pub gcn: GCNRun,
    pub gcn_no_rl: GCNRun,
}

impl BaselineResults {
    pub fn row(&self, c: Condition) -> &BaselineRow {
        self.rows.iter().find(|r| r.condition == c).expect("every condition is run")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("condition,{}\n", MetricReport::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.condition, r.report.csv_row()));
        }
        out
    }
}

/// Trains and tests all four conditions with shared seeds and learner
/// settings. With `out`, each loop run gets its own run directory and the
/// table is written to `baselines.csv`.
pub fn run_baselines(prepared: &Prepared, config: &GCNConfig, out: Option<&Path>) -> Result<BaselineResults> {
    config.validate()?;
    let data = prepared.seed_data();
    let test = |learner| evaluate_learner(learner, &prepared.test, &prepared.vocab, &prepared.table, &eval_generation(config), &config.weights);

    let seed_only = spawn_and_train_learner(&prepared.seed_train, &prepared.vocab, config)?;
    let full_train = Corpus::concat("full_data", &[&prepared.seed_train, &prepared.rest])?;
    let full = spawn_and_train_learner(&full_train, &prepared.vocab, config)?;

    let generator = pretrain_generator(&prepared.seed_train, &prepared.vocab, config)?;
    let mut runs = Vec::new();
    for (cond, apply_ppo) in [(Condition::Gcn, true), (Condition::GcnNoRl, false)] {
        let mut dir = match out {
            Some(o) => {
                let d = RunDir::create(&o.join(cond.name()))?;
                d.write_config(config)?;
                Some(d)
            }
            None => None,
        };
        let sink: &mut dyn IterationSink = match dir.as_mut() {
            Some(d) => d,
            None => &mut (),
        };
        let run = run_gcn(config, data, generator.clone(), apply_ppo, sink)?;
        if let Some(d) = &dir {
            d.write_final(&run, "seed_val")?;
        }
        runs.push(run);
    }
    let gcn_no_rl = runs.pop().expect("two runs");
    let gcn = runs.pop().expect("two runs");

    let rows = vec![
        BaselineRow {
            condition: Condition::FullData,
            train_conversations: full_train.len(),
            report: test(&full)?,
        },
        BaselineRow {
            condition: Condition::SeedOnly,
            train_conversations: prepared.seed_train.len(),
            report: test(&seed_only)?,
        },
        BaselineRow {
            condition: Condition::Gcn,
            train_conversations: prepared.seed_train.len() + gcn.final_dprime.len(),
            report: test(&gcn.final_learner)?,
        },
        BaselineRow {
            condition: Condition::GcnNoRl,
            train_conversations: prepared.seed_train.len() + gcn_no_rl.final_dprime.len(),
            report: test(&gcn_no_rl.final_learner)?,
        },
    ];
    let results = BaselineResults { rows, gcn, gcn_no_rl };
    if let Some(o) = out {
        let p = o.join("baselines.csv");
        fs::write(&p, results.to_csv()).map_err(|e| GcnError::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(results)
}
