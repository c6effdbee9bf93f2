//! Run manifests: a content-addressed record of what was run and what it
//! wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    // serde_json preserves struct field order, so the encoding is stable
    let json = serde_json::to_vec(value).expect("config types serialize to JSON");
    sha256_hex(&json)
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub run_id: String,
    pub command: String,
    pub tool_version: String,
    /// Unix seconds; informational only and excluded from `run_id`.
    pub created_unix: u64,
    pub seed: u64,
    /// The effective configuration, as run.
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    /// `run_id` is the hash of `(command, config, seed)`.
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let run_id = content_hash(&(command, &config, seed));
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Ok(Manifest {
            manifest_version: MANIFEST_VERSION,
            run_id,
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            created_unix,
            seed,
            config,
            artifacts: Vec::new(),
        })
    }

    /// Hash `dir/rel` and record it.
    pub fn add_artifact(&mut self, dir: &Path, rel: impl Into<PathBuf>) -> Result<()> {
        let rel = rel.into();
        let sha256 = file_hash(&dir.join(&rel))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact { path: rel, sha256 });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::data::write_all(path, &json)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Artifacts whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut changed = Vec::new();
        for a in &self.artifacts {
            if file_hash(&dir.join(&a.path))? != a.sha256 {
                changed.push(a.path.clone());
            }
        }
        Ok(changed)
    }
}
