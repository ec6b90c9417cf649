use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GCNConfig, GCNRun, GcnError, IterationRecord, IterationSink, Result};
use crate::lm::{save_checkpoint, LMModel};
use crate::metrics::MetricReport;
use crate::ppo::{append_log, PpoLogLine};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.jsonl";
/// Wall-clock per iteration, kept apart so `history.jsonl` is reproducible.
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const PPO_LOG_FILE: &str = "ppo_log.jsonl";
pub const FINAL_FILE: &str = "final.json";
pub const DPRIME_FILE: &str = "dprime_final.jsonl";

fn io(path: &Path, e: impl std::fmt::Display) -> GcnError {
    GcnError::Io(format!("{}: {e}", path.display()))
}

/// Summary written once the run finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_reward: f64,
    pub ppo_applied: bool,
    pub dprime_size: usize,
    pub copy_rate: f64,
    /// Corpus the final learner was scored on.
    pub eval_corpus: String,
    pub final_report: MetricReport,
}

/// Output directory of one loop run.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the layout, discarding logs of any earlier run there.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| io(root, e))?;
        for f in [HISTORY_FILE, TIMINGS_FILE, PPO_LOG_FILE] {
            let p = root.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| io(&p, e))?;
            }
        }
        Ok(Self { root: root.to_path_buf() })
    }

    /// An existing run directory, for reading.
    pub fn open(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn generator_checkpoint(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("gen_iter_{iteration}.ckpt"))
    }

    pub fn final_learner_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final_learner.ckpt")
    }

    pub fn write_config(&self, config: &GCNConfig) -> Result<()> {
        let p = self.root.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(&config.to_flat_json()).expect("config serializes");
        fs::write(&p, text + "\n").map_err(|e| io(&p, e))
    }

    fn append(&self, file: &str, line: &str) -> Result<()> {
        let p = self.root.join(file);
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(|e| io(&p, e))?;
        writeln!(f, "{line}").map_err(|e| io(&p, e))
    }

    pub fn write_final(&self, run: &GCNRun, eval_corpus: &str) -> Result<()> {
        save_checkpoint(&run.final_learner, &self.final_learner_checkpoint())?;
        run.final_dprime.write_jsonl(&self.root.join(DPRIME_FILE))?;
        let summary = FinalSummary {
            iterations: run.history.len(),
            best_iteration: run.best_iteration,
            best_reward: run.best_reward(),
            ppo_applied: run.ppo_applied,
            dprime_size: run.final_dprime.len(),
            copy_rate: run.copy_rate,
            eval_corpus: eval_corpus.to_string(),
            final_report: run.final_report.clone(),
        };
        let p = self.root.join(FINAL_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&p, text + "\n").map_err(|e| io(&p, e))
    }

    pub fn read_history(&self) -> Result<Vec<IterationRecord>> {
        read_history(&self.root.join(HISTORY_FILE))
    }

    pub fn read_final(&self) -> Result<FinalSummary> {
        let p = self.root.join(FINAL_FILE);
        let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| io(&p, e))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io(path, e)))
        .collect()
}

impl IterationSink for RunDir {
    fn record(&mut self, rec: &IterationRecord, generator: &LMModel) -> Result<()> {
        self.append(HISTORY_FILE, &serde_json::to_string(rec).expect("record serializes"))?;
        let timing = serde_json::json!({"iteration": rec.iteration, "wall_seconds": rec.wall_seconds});
        self.append(TIMINGS_FILE, &timing.to_string())?;
        if let Some(s) = &rec.ppo {
            let line = PpoLogLine {
                iter: rec.iteration,
                policy_loss: s.policy_loss,
                value_loss: s.value_loss,
                mean_kl: s.mean_kl,
                clip_fraction: s.clip_fraction,
                mean_reward: rec.reward,
            };
            append_log(&self.root.join(PPO_LOG_FILE), &line)?;
        }
        save_checkpoint(generator, &self.generator_checkpoint(rec.iteration))?;
        Ok(())
    }
}
