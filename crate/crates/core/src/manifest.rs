//! One manifest per command run: what ran, with which fully resolved
//! settings, and every file it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// `pretrain` or `eval <task>`.
    pub command: String,
    /// The parsed invocation, enough to run it again.
    pub invocation: Value,
    /// Resolved configuration with every default materialized.
    pub config: Value,
    pub code_version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub outputs: Vec<PathBuf>,
    pub status: RunStatus,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn begin(command: impl Into<String>, invocation: Value, config: Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            invocation,
            config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started: unix_now(),
            finished: 0.0,
            outputs: Vec::new(),
            status: RunStatus::Completed,
        }
    }

    /// Stamps the end time and status, then writes `manifest.json` into
    /// `dir`. The manifest lists itself among the outputs.
    pub fn finish(mut self, dir: &Path, outcome: &Result<()>) -> Result<PathBuf> {
        self.finished = unix_now();
        if let Err(e) = outcome {
            self.status = RunStatus::Failed { error: e.to_string() };
        }
        let path = dir.join(MANIFEST_FILE);
        if !self.outputs.contains(&path) {
            self.outputs.push(path.clone());
        }
        let mut bytes = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_lists_itself() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::begin("pretrain", json!({"a": 1}), json!({"train": {"seed": 4}}), 4);
        m.outputs.push(dir.path().join("steps.jsonl"));
        let p = m.finish(dir.path(), &Ok(())).unwrap();
        let back = RunManifest::read(&p).unwrap();
        assert_eq!(back.outputs.len(), 2);
        assert!(back.outputs.contains(&p));
        assert_eq!(back.status, RunStatus::Completed);
        assert!(back.finished >= back.started);
    }

    #[test]
    fn failure_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::begin("eval cluster", json!({}), json!({}), 0);
        let p = m.finish(dir.path(), &Err(Error::Config("boom".into()))).unwrap();
        assert!(matches!(RunManifest::read(&p).unwrap().status, RunStatus::Failed { .. }));
    }
}
