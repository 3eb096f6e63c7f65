//! Run manifests: a reproducibility record written next to every command's
//! outputs. Re-running a command with the same manifest parameters must
//! produce bit-identical numeric outputs, so manifests carry no clocks.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<ArtifactRecord>,
}

#[derive(Debug, Serialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub fnv1a64: String,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, inputs: &[&Path]) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
        }
    }

    /// Record an artifact by hashing its current on-disk bytes.
    pub fn record(&mut self, root: &Path, rel: &str) -> Result<()> {
        let bytes = std::fs::read(root.join(rel))?;
        self.outputs.push(ArtifactRecord {
            path: rel.to_string(),
            fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        });
        Ok(())
    }

    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
