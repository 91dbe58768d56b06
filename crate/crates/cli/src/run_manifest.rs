use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use peftkit::checkpoint::{BLOB_FILE, MANIFEST_FILE};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// What a command ran with: enough to repeat it deterministically.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    /// SHA-256 of each input file; checkpoint directories contribute their
    /// manifest and blob.
    pub inputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: Value::Null,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            for f in [path.join(MANIFEST_FILE), path.join(BLOB_FILE)] {
                let digest = sha256_file(&f)?;
                self.inputs.insert(f.display().to_string(), digest);
            }
        } else {
            let digest = sha256_file(path)?;
            self.inputs.insert(path.display().to_string(), digest);
        }
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix_ms = now_ms();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
