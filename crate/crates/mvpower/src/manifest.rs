//! Reproducibility manifest written alongside command outputs.
//!
//! Primary outputs (models, statistics, CSV tables) are byte-identical across
//! reruns with the same seed; anything time-dependent lives only here.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand that produced the outputs.
    pub command: String,
    pub version: String,
    pub created_utc: String,
    pub master_seed: u64,
    /// Flattened effective configuration, sorted by key.
    pub config: BTreeMap<String, String>,
    /// Digests of every input file that was read.
    pub inputs: Vec<InputDigest>,
}

impl RunManifest {
    pub fn new(command: &str, master_seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_utc: chrono::Utc::now().to_rfc3339(),
            master_seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(hasher.finalize()),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::numeric(format!("could not serialize manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_match_known_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("input.txt");
        std::fs::write(&file, b"abc").unwrap();
        let mut manifest = RunManifest::new("fit", 42);
        manifest.add_input(&file).unwrap();
        assert_eq!(
            manifest.inputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::new("power", 7);
        manifest.set("alpha", 0.05);
        manifest.set("family", "negative_binomial");
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "power");
        assert_eq!(back.master_seed, 7);
        assert_eq!(back.config["alpha"], "0.05");
        assert_eq!(back.version, env!("CARGO_PKG_VERSION"));
    }
}
