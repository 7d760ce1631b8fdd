use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tagcc::anchors::sha256_hex;
use tagcc::metrics::Scores;
use tagcc::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation and everything it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Option<TrainConfig>,
    pub schema_fingerprint: Option<String>,
    pub anchor_source: Option<String>,
    pub embedding_provider: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub metrics: Option<Scores>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            schema_fingerprint: None,
            anchor_source: None,
            embedding_provider: None,
            seed: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            metrics: None,
        }
    }

    fn entry(path: &Path) -> anyhow::Result<Artifact> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        })
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(Self::entry(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> anyhow::Result<()> {
        self.artifacts.push(Self::entry(path)?);
        Ok(())
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
