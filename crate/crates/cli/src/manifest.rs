use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tsception::{Error, Result};

/// Record of one command invocation, written beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the `config` entries rendered as sorted `key=value` lines.
    pub config_digest: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_digest: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.config.insert(key.into(), value.to_string());
        self
    }

    /// Add `key=value` lines under a prefix.
    pub fn set_kv_text(&mut self, prefix: &str, text: &str) -> &mut Self {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(format!("{prefix}.{}", k.trim()), v.trim());
            }
        }
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.config {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Write `<dir>/<command>.manifest.toml`.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.config_digest = self.digest();
        let text = toml::to_string(&self).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let path = dir.join(format!("{}.manifest.toml", self.command));
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
