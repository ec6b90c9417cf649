use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Provenance record written next to every command's output, first when the
/// command starts and again when it ends (successfully or not).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub threads: usize,
    /// Flat dotted-key configuration actually used.
    pub config: Value,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, Value>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct ManifestWriter {
    path: PathBuf,
    pub manifest: RunManifest,
}

impl ManifestWriter {
    /// Digests the inputs and writes the manifest with status `running`.
    /// Unreadable inputs are recorded rather than aborting, so a failing
    /// command still leaves a manifest behind.
    pub fn start(path: PathBuf, command: &str, threads: usize, config: Value, inputs: &[PathBuf]) -> Result<Self, CliError> {
        let inputs = inputs
            .iter()
            .map(|p| {
                let d = sha256_file(p).unwrap_or_else(|e| format!("unreadable: {e}"));
                (p.display().to_string(), d)
            })
            .collect();
        let w = Self {
            path,
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                threads,
                config,
                inputs,
                started: now(),
                finished: None,
                status: "running".into(),
                notes: BTreeMap::new(),
            },
        };
        w.write()?;
        Ok(w)
    }

    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.manifest.notes.insert(key.to_string(), value.into());
    }

    fn write(&self) -> Result<(), CliError> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&self.path, text + "\n").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish<T>(mut self, outcome: &Result<T, CliError>) -> Result<(), CliError> {
        self.manifest.finished = Some(now());
        self.manifest.status = match outcome {
            Ok(_) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.write()
    }
}
