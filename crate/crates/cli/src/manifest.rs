//! Per-run manifest and the files every output directory carries.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Identifies the code that produced a run.
pub const SOURCE_REVISION: &str = concat!("perfusion-cli ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub source_revision: String,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub duration_secs: f64,
}

/// SHA-256 of the command name and the resolved config document.
pub fn config_hash(command: &str, cfg: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(cfg.to_pretty_json().as_bytes());
    hex::encode(h.finalize())
}

/// Tracks an output directory while a command runs.
pub struct RunDir {
    pub path: PathBuf,
    pub run_id: String,
    command: String,
    hash: String,
    artifacts: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(path: &Path, command: &str, cfg: &ExperimentConfig) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let hash = config_hash(command, cfg);
        let run = RunDir {
            path: path.to_path_buf(),
            run_id: format!("{command}-{}", &hash[..12]),
            command: command.to_string(),
            hash,
            artifacts: Vec::new(),
            started: Instant::now(),
        };
        run.write(CONFIG_FILE, cfg.to_pretty_json().as_bytes())?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records `name` as an artifact of this run.
    pub fn produced(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.artifacts.sort();
        let m = RunManifest {
            run_id: self.run_id.clone(),
            command: self.command.clone(),
            config_hash: self.hash.clone(),
            source_revision: SOURCE_REVISION.to_string(),
            artifacts: self.artifacts.clone(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        self.write(MANIFEST_FILE, text.as_bytes())?;
        Ok(m)
    }
}
