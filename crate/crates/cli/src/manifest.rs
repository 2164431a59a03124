//! Per-run manifest: command, configuration snapshot, input hashes,
//! outputs, and duration.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

use dstl_core::{Error, Result};

pub const FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub run_id: String,
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    pub duration_s: f64,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            run_id: String::new(),
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_s: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.inputs.push(InputRecord {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    /// Creates the run directory. A directory that already holds a manifest
    /// belongs to another run and is refused.
    pub fn prepare(&self, dir: &Path) -> Result<()> {
        let m = dir.join(FILE);
        if m.exists() {
            return Err(Error::Config(format!(
                "{} already exists; choose a fresh --out directory",
                m.display()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    }

    /// Derives the run id from the command, configuration, and inputs, and
    /// writes the manifest.
    pub fn finish(mut self, dir: &Path, elapsed: Duration) -> Result<()> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(serde_json::to_vec(&self.config)?);
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
        }
        self.run_id = hex::encode(&h.finalize()[..8]);
        self.duration_s = elapsed.as_secs_f64();
        let path = dir.join(FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?).map_err(|e| Error::Io { path, source: e })
    }
}
