use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Record of what produced the files in an output directory. Contains no
/// timestamps, so identical flags give an identical manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of everything below except the outputs.
    pub id: String,
    pub command: String,
    pub version: String,
    pub config: Value,
    pub dataset_fingerprint: Option<String>,
    pub seed: u64,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

pub fn version_string() -> String {
    match option_env!("BOICR_GIT_DESCRIBE") {
        Some(d) => format!("boicr {} ({d})", env!("CARGO_PKG_VERSION")),
        None => format!("boicr {}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, dataset_fingerprint: Option<String>, seed: u64) -> Self {
        let mut m = RunManifest {
            id: String::new(),
            command: command.to_string(),
            version: version_string(),
            config,
            dataset_fingerprint,
            seed,
            outputs: Vec::new(),
        };
        let key = serde_json::to_vec(&(&m.command, &m.version, &m.config, &m.dataset_fingerprint, m.seed))
            .expect("manifest serializes");
        m.id = hex::encode(&Sha256::digest(&key)[..8]);
        m
    }

    /// Records every written file with its checksum.
    pub fn with_outputs(mut self, paths: &[&Path]) -> Result<Self> {
        for p in paths {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            self.outputs.push(OutputFile { path: name, sha256: file_fingerprint(p)? });
        }
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
