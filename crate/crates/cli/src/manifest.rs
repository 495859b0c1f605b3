use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use dpenet_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RUN_MANIFEST: &str = "run.json";

/// Record of one command invocation, written once per output directory.
/// Passing it back through `--config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    pub paths: BTreeMap<String, PathBuf>,
    pub started_at: DateTime<Utc>,
    /// Unset while the command is still running or if it failed.
    pub finished_at: Option<DateTime<Utc>>,
}

impl RunManifest {
    pub fn start(command: impl Into<String>, config: &RunConfig, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config: config.clone(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            paths: BTreeMap::new(),
            started_at: Utc::now(),
            finished_at: None,
        }
    }

    pub fn path(mut self, key: &str, path: &Path) -> Self {
        self.paths.insert(key.to_string(), path.to_path_buf());
        self
    }

    /// Writes `run.json` into `dir`, replacing any earlier one.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn finish(&mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = Some(Utc::now());
        self.write(dir)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config("manifest", format!("{}: {e}", path.display())))
    }
}
