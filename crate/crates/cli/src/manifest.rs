//! Run manifests: every command records what it did and what it produced.

use crate::error::{CliError, Result};
use crate::fsutil;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: Vec<String>,
    pub versions: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64, threads: usize) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("sdf".to_string(), env!("CARGO_PKG_VERSION").to_string());
        RunManifest {
            version: 1,
            command: command.to_string(),
            config_hash,
            seed,
            threads,
            artifacts: Vec::new(),
            versions,
            wall_time_secs: 0.0,
        }
    }

    pub fn with_artifacts(mut self, paths: &[PathBuf]) -> Self {
        self.artifacts = paths.iter().map(|p| p.display().to_string()).collect();
        self
    }

    /// Atomically write `run_manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::Run(e.to_string()))?;
        let path = dir.join(RUN_MANIFEST_NAME);
        fsutil::write_atomic(&path, &bytes)?;
        Ok(path)
    }
}
