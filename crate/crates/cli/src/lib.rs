//! Command implementations behind the `gcn-forge` binary.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation
//! error. Every command writes a [`RunManifest`] before doing real work.

mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use gcn_forge::corpus::{load_jsonl, make_toy_corpus, CorpusError};
use gcn_forge::gcn::{
    eval_generation, prepare, pretrain_generator, read_history, run_baselines, run_gcn, GCNConfig, GcnError, IterationRecord,
    IterationSink, Prepared, RunDir, FINAL_FILE, HISTORY_FILE,
};
use gcn_forge::lm::{load_checkpoint, LMModel, LmError};
use gcn_forge::metrics::{evaluate_learner, MetricsError};
use gcn_forge::par;

pub use manifest::{sha256_file, ManifestWriter, RunManifest};

pub const MANIFEST_FILE: &str = "manifest.json";
const DATA_FILES: [&str; 6] = ["seed_train.jsonl", "seed_val.jsonl", "rest.jsonl", "test.jsonl", "vocab.json", "embeddings.bin"];

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad configuration or inputs that fail validation.
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn corpus_error(e: CorpusError) -> CliError {
    match e {
        CorpusError::BadFraction(_) | CorpusError::TooSmall { .. } | CorpusError::VocabTooSmall(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn lm_error(e: LmError) -> CliError {
    match e {
        LmError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn metrics_error(e: MetricsError) -> CliError {
    match e {
        MetricsError::NothingToEvaluate | MetricsError::TableMismatch { .. } => CliError::Usage(e.to_string()),
        MetricsError::Lm(l) => lm_error(l),
        other => CliError::Runtime(other.to_string()),
    }
}

impl From<GcnError> for CliError {
    fn from(e: GcnError) -> Self {
        match e {
            GcnError::Config(_) | GcnError::NoPrompts => CliError::Usage(e.to_string()),
            GcnError::Corpus(c) => corpus_error(c),
            GcnError::Lm(l) => lm_error(l),
            GcnError::Metrics(m) => metrics_error(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gcn-forge", version, about = "Generator/learner dialogue data synthesis")]
pub struct Cli {
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long, global = true, env = "GCN_FORGE_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources, lowest to highest precedence: defaults, the
/// `--config` file, `--set` pairs, dedicated flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat JSON object with dotted keys, e.g. {"ppo.kl_coef": 0.1}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// KEY=VALUE override; VALUE is parsed as JSON, else taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic templated dialogue corpus as JSONL.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split a corpus, build the vocabulary and fit evaluation embeddings.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed_fraction: Option<f64>,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the generator/learner loop on prepared data.
    RunGcn {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and test the four comparison conditions.
    Baselines {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score one learner checkpoint on a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let threads = cli.threads as usize;
    par::with_threads(threads, || match &cli.command {
        Command::MakeToyCorpus { out, n, seed } => cmd_make_toy_corpus(out, *n as usize, *seed, threads),
        Command::Prepare {
            corpus,
            out_dir,
            seed_fraction,
            val_fraction,
            cfg,
        } => {
            let mut flags = Map::new();
            if let Some(f) = seed_fraction {
                flags.insert("seed_fraction".into(), Value::from(*f));
            }
            if let Some(f) = val_fraction {
                flags.insert("val_fraction".into(), Value::from(*f));
            }
            cmd_prepare(corpus, out_dir, &resolve_config(cfg, flags)?, cfg.config.as_deref(), threads)
        }
        Command::RunGcn {
            data_dir,
            out_dir,
            max_iterations,
            cfg,
        } => {
            let mut flags = Map::new();
            if let Some(m) = max_iterations {
                flags.insert("max_iterations".into(), Value::from(*m));
            }
            cmd_run_gcn(data_dir, out_dir, &resolve_config(cfg, flags)?, cfg.config.as_deref(), threads)
        }
        Command::Baselines { data_dir, out_dir, cfg } => {
            cmd_baselines(data_dir, out_dir, &resolve_config(cfg, Map::new())?, cfg.config.as_deref(), threads)
        }
        Command::Eval {
            model,
            corpus,
            data_dir,
            out,
            cfg,
        } => cmd_eval(model, corpus, data_dir, out, &resolve_config(cfg, Map::new())?, cfg.config.as_deref(), threads),
        Command::Report { run_dir, out } => cmd_report(run_dir, out, threads),
    })
}

/// Merges defaults < file < `--set` < flags and validates the result.
pub fn resolve_config(args: &ConfigArgs, flags: Map<String, Value>) -> Result<GCNConfig> {
    let mut merged = Map::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => merged.extend(m),
            Ok(_) => return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => return Err(CliError::Usage(format!("{}: {e}", path.display()))),
        }
    }
    for pair in &args.set {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")));
        };
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        merged.insert(k.trim().to_string(), value);
    }
    if let Some(s) = args.rng_seed {
        merged.insert("rng_seed".into(), Value::from(s));
    }
    merged.extend(flags);
    let config = GCNConfig::default().with_overrides(&merged)?;
    config.validate()?;
    Ok(config)
}

fn with_config_file(mut inputs: Vec<PathBuf>, config_file: Option<&Path>) -> Vec<PathBuf> {
    if let Some(c) = config_file {
        inputs.push(c.to_path_buf());
    }
    inputs
}

fn data_inputs(data_dir: &Path) -> Vec<PathBuf> {
    DATA_FILES.iter().map(|f| data_dir.join(f)).collect()
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Runs `body` between the two manifest writes.
fn tracked<T>(mut manifest: ManifestWriter, body: impl FnOnce(&mut ManifestWriter) -> Result<T>) -> Result<T> {
    let outcome = body(&mut manifest);
    manifest.finish(&outcome)?;
    outcome
}

pub fn cmd_make_toy_corpus(out: &Path, n: usize, seed: u64, threads: usize) -> Result<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let cfg = serde_json::json!({"n": n, "seed": seed});
    let m = ManifestWriter::start(sibling_manifest(out), "make-toy-corpus", threads, cfg, &[])?;
    tracked(m, |_| {
        make_toy_corpus(n, seed).write_jsonl(out).map_err(corpus_error)?;
        println!("wrote {n} conversations to {}", out.display());
        Ok(())
    })
}

pub fn cmd_prepare(corpus: &Path, out_dir: &Path, config: &GCNConfig, config_file: Option<&Path>, threads: usize) -> Result<()> {
    let inputs = with_config_file(vec![corpus.to_path_buf()], config_file);
    let m = ManifestWriter::start(out_dir.join(MANIFEST_FILE), "prepare", threads, config.to_flat_json(), &inputs)?;
    tracked(m, |m| {
        let full = load_jsonl(corpus).map_err(corpus_error)?;
        let p = prepare(&full, config)?;
        p.write(out_dir)?;
        for name in ["seed_train", "seed_val", "rest", "test"] {
            m.note(&format!("{name}_conversations"), p.split(name).expect("known split").len());
        }
        m.note("vocab_size", p.vocab.len());
        println!(
            "seed_train={} seed_val={} rest={} test={} vocab={}",
            p.seed_train.len(),
            p.seed_val.len(),
            p.rest.len(),
            p.test.len(),
            p.vocab.len()
        );
        Ok(())
    })
}

fn read_prepared(data_dir: &Path) -> Result<Prepared> {
    Ok(Prepared::read(data_dir)?)
}

pub fn cmd_run_gcn(data_dir: &Path, out_dir: &Path, config: &GCNConfig, config_file: Option<&Path>, threads: usize) -> Result<()> {
    let inputs = with_config_file(data_inputs(data_dir), config_file);
    let m = ManifestWriter::start(out_dir.join(MANIFEST_FILE), "run-gcn", threads, config.to_flat_json(), &inputs)?;
    tracked(m, |m| {
        let p = read_prepared(data_dir)?;
        let mut rd = RunDir::create(out_dir)?;
        rd.write_config(config)?;
        let generator = pretrain_generator(&p.seed_train, &p.vocab, config)?;
        let mut sink = |rec: &IterationRecord, g: &LMModel| -> gcn_forge::gcn::Result<()> {
            rd.record(rec, g)?;
            println!("iter={} reward={}", rec.iteration, rec.reward);
            let _ = std::io::stdout().flush();
            Ok(())
        };
        let run = run_gcn(config, p.seed_data(), generator, true, &mut sink)?;
        rd.write_final(&run, "seed_val")?;
        m.note("iterations", run.history.len());
        m.note("best_iteration", run.best_iteration);
        m.note("best_reward", run.best_reward());
        m.note("final_seed_val_reward", run.final_report.combined_reward);
        m.note("copy_rate", run.copy_rate);
        Ok(())
    })
}

pub fn cmd_baselines(data_dir: &Path, out_dir: &Path, config: &GCNConfig, config_file: Option<&Path>, threads: usize) -> Result<()> {
    let inputs = with_config_file(data_inputs(data_dir), config_file);
    let mut m = ManifestWriter::start(out_dir.join(MANIFEST_FILE), "baselines", threads, config.to_flat_json(), &inputs)?;
    // both loop conditions read the same configuration, hence the same streams
    m.note("gcn_rng_seed", config.rng_seed);
    m.note("gcn_no_rl_rng_seed", config.rng_seed);
    m.note("learner_init_seed", config.derive_seed("learner_init"));
    tracked(m, |m| {
        let p = read_prepared(data_dir)?;
        let res = run_baselines(&p, config, Some(out_dir))?;
        for row in &res.rows {
            m.note(&format!("{}_train_conversations", row.condition), row.train_conversations);
        }
        print!("{}", res.to_csv());
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    model: &Path,
    corpus: &Path,
    data_dir: &Path,
    out: &Path,
    config: &GCNConfig,
    config_file: Option<&Path>,
    threads: usize,
) -> Result<()> {
    let inputs = with_config_file(
        vec![model.to_path_buf(), corpus.to_path_buf(), data_dir.join("vocab.json"), data_dir.join("embeddings.bin")],
        config_file,
    );
    let m = ManifestWriter::start(sibling_manifest(out), "eval", threads, config.to_flat_json(), &inputs)?;
    tracked(m, |_| {
        let learner = load_checkpoint(model).map_err(lm_error)?;
        let vocab = gcn_forge::corpus::Vocab::load(&data_dir.join("vocab.json")).map_err(corpus_error)?;
        let table = gcn_forge::metrics::EmbeddingTable::load(&data_dir.join("embeddings.bin")).map_err(metrics_error)?;
        if learner.config().vocab_size != vocab.len() {
            return Err(CliError::Usage(format!(
                "checkpoint expects {} vocabulary entries but {} has {}",
                learner.config().vocab_size,
                data_dir.join("vocab.json").display(),
                vocab.len()
            )));
        }
        let c = load_jsonl(corpus).map_err(corpus_error)?;
        if c.is_empty() {
            return Err(CliError::Usage(format!("{}: corpus is empty", corpus.display())));
        }
        let report = evaluate_learner(&learner, &c, &vocab, &table, &eval_generation(config), &config.weights).map_err(metrics_error)?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(out, text + "\n").map_err(|e| CliError::io(out, e))?;
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
        Ok(())
    })
}

/// First index of the largest reward.
fn argmax_reward(history: &[IterationRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in history.iter().enumerate() {
        if best.is_none_or(|b| r.reward > history[b].reward) {
            best = Some(i);
        }
    }
    best
}

pub fn cmd_report(run_dir: &Path, out: &Path, threads: usize) -> Result<()> {
    let history_path = run_dir.join(HISTORY_FILE);
    let baselines_path = [run_dir.join("baselines.csv"), run_dir.join("..").join("baselines.csv")]
        .into_iter()
        .find(|p| p.exists());
    let mut inputs = vec![history_path.clone()];
    inputs.extend(baselines_path.clone());
    if run_dir.join(FINAL_FILE).exists() {
        inputs.push(run_dir.join(FINAL_FILE));
    }
    let m = ManifestWriter::start(out.join(MANIFEST_FILE), "report", threads, Value::Object(Map::new()), &inputs)?;
    tracked(m, |_| {
        let history = read_history(&history_path)?;
        let mut curve = String::from("iteration,reward,mean_kl,clip_fraction\n");
        for r in &history {
            let clip = r.ppo.as_ref().map_or(0.0, |s| s.clip_fraction);
            curve.push_str(&format!("{},{},{},{}\n", r.iteration, r.reward, r.mean_kl, clip));
        }
        let curve_path = out.join("reward_curve.csv");
        fs::write(&curve_path, curve).map_err(|e| CliError::io(&curve_path, e))?;

        let mut summary = format!("run directory   {}\niterations      {}\n", run_dir.display(), history.len());
        if let Some(b) = argmax_reward(&history) {
            summary.push_str(&format!("best iteration  {}\nbest reward     {:.6}\n", history[b].iteration, history[b].reward));
        }
        if let Ok(f) = RunDir::open(run_dir).read_final() {
            summary.push_str(&format!(
                "final learner   combined {:.6} on {} (synthetic set {}, copy rate {:.3})\n",
                f.final_report.combined_reward, f.eval_corpus, f.dprime_size, f.copy_rate
            ));
        }
        if let Some(bp) = &baselines_path {
            let csv = fs::read_to_string(bp).map_err(|e| CliError::io(bp, e))?;
            summary.push_str("\nbaselines (test split)\n");
            for line in csv.lines() {
                let cells: Vec<&str> = line.split(',').collect();
                summary.push_str(&cells.iter().map(|c| format!("{c:>10}")).collect::<Vec<_>>().join(" "));
                summary.push('\n');
            }
        }
        let summary_path = out.join("summary.txt");
        fs::write(&summary_path, &summary).map_err(|e| CliError::io(&summary_path, e))?;
        print!("{summary}");
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        std::iter::once("gcn-forge").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(args("make-toy-corpus --out /tmp/x.jsonl --n 0")), 2);
        assert_eq!(run(args("no-such-command")), 2);
        assert_eq!(run(args("--threads 0 report --run-dir a --out b")), 2);
        assert_eq!(run(args("--help")), 0);
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"rng_seed": 3, "max_iterations": 7, "ppo.kl_coef": 0.3}"#).unwrap();
        let a = ConfigArgs {
            config: Some(file),
            set: vec!["ppo.kl_coef=0.4".into()],
            rng_seed: Some(9),
        };
        let mut flags = Map::new();
        flags.insert("max_iterations".into(), Value::from(2));
        let c = resolve_config(&a, flags).unwrap();
        assert_eq!((c.rng_seed, c.max_iterations, c.ppo.kl_coef), (9, 2, 0.4));
        assert_eq!(c.patience, 3);

        let bad = ConfigArgs {
            set: vec!["nope=1".into()],
            ..ConfigArgs::default()
        };
        assert!(matches!(resolve_config(&bad, Map::new()), Err(CliError::Usage(_))));
        let missing = ConfigArgs {
            config: Some(dir.path().join("absent.json")),
            ..ConfigArgs::default()
        };
        assert!(matches!(resolve_config(&missing, Map::new()), Err(CliError::Runtime(_))));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let rec = |i, r| IterationRecord {
            iteration: i,
            dataset_size: 0,
            reward: r,
            report: gcn_forge::metrics::MetricReport::zero(0),
            mean_kl: 0.0,
            ppo: None,
            wall_seconds: 0.0,
        };
        assert_eq!(argmax_reward(&[rec(0, 0.1), rec(1, 0.3), rec(2, 0.3)]), Some(1));
        assert_eq!(argmax_reward(&[]), None);
    }
}
