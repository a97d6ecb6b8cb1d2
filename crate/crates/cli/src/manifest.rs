use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use switchtx::{digest_bytes, Error, Result};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hardware {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl Hardware {
    pub fn current() -> Self {
        Hardware {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub train: u64,
    pub split: u64,
    pub synthetic: u64,
}

/// What a command read and wrote. Output locations are relative to the
/// output directory, which itself is left out so that two runs into
/// different directories produce the same manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_digest: String,
    pub effective_config: serde_json::Value,
    pub seeds: Seeds,
    pub dataset_digest: String,
    /// Digests of other inputs, e.g. the checkpoint being evaluated.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub hardware: Hardware,
    pub warnings: Vec<String>,
}

pub fn effective_config(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serialises");
    if let Some(m) = v.as_object_mut() {
        m.remove("output_dir");
    }
    v
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, dataset_digest: String) -> Self {
        let effective = effective_config(cfg);
        let config_digest = digest_bytes(serde_json::to_string(&effective).expect("json").as_bytes());
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest,
            effective_config: effective,
            seeds: Seeds {
                model: cfg.model_seed,
                train: cfg.train_seed,
                split: cfg.split_seed,
                synthetic: cfg.synthetic_seed,
            },
            dataset_digest,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            hardware: Hardware::current(),
            warnings: Vec::new(),
        }
    }

    /// Writes `bytes` to `dir/name` and records its digest.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.to_string(), digest_bytes(bytes));
        Ok(())
    }

    /// Records a file some other routine already wrote.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.to_string(), digest_bytes(&bytes));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("manifest-{}.json", self.command));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
