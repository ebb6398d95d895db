use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one CLI run, written beside its primary output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Recorder {
    command: String,
    seed: u64,
    started_at: String,
    config: Sha256,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            started_at: now(),
            config: Sha256::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Folds the effective configuration into the config digest.
    pub fn config(&mut self, label: &str, value: &impl Serialize) -> Result<()> {
        let json = serde_json::to_string(value)?;
        self.config.update(label.as_bytes());
        self.config.update([0]);
        self.config.update(json.as_bytes());
        self.config.update([0]);
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_file() {
            self.inputs.insert(path.display().to_string(), file_digest(path)?);
        }
        Ok(())
    }

    /// Registers an output, refusing paths that were read as inputs.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let key = path.display().to_string();
        let same = |p: &str| match (fs::canonicalize(p), fs::canonicalize(path)) {
            (Ok(a), Ok(b)) => a == b,
            _ => p == key,
        };
        if self.inputs.keys().any(|p| same(p)) {
            bail!("output {key} would overwrite an input");
        }
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Registers an output that is deliberately rewritten in place.
    pub fn output_in_place(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes the outputs and writes `<primary>.manifest.json` atomically.
    pub fn finish(self, primary: &Path) -> Result<RunManifest> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(p.display().to_string(), file_digest(p)?);
        }
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config_digest: hex(&self.config.finalize()),
            inputs: self.inputs,
            outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let path = manifest_path(primary);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(manifest)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
