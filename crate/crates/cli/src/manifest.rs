//! Per-command run manifests with content hashes of inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Relative path to hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            extra: BTreeMap::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    fn key(run: &Path, path: &Path) -> String {
        path.strip_prefix(run).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    pub fn input(&mut self, run: &Path, path: &Path) -> CliResult<()> {
        self.inputs.insert(Self::key(run, path), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, run: &Path, path: &Path) -> CliResult<()> {
        self.outputs.insert(Self::key(run, path), sha256_file(path)?);
        Ok(())
    }

    /// Write to `<run>/manifests/<name>.json`.
    pub fn write(mut self, run: &Path, name: &str) -> CliResult<PathBuf> {
        self.finished_unix = now_unix();
        let dir = run.join("manifests");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?)?;
        Ok(path)
    }
}
