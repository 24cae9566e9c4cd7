use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use zmitosis::seeds::SeedTree;

use crate::config::RunConfig;
use crate::errors::{CliError, StageContext};

pub const TOOL: &str = "zmitosis";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to regenerate a command's outputs: the effective
/// config, the command line, input digests and the seed derivation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    pub config: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).stage("manifest", Some(path))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let master = SeedTree::new(cfg.master_seed);
        let mut seeds = BTreeMap::new();
        seeds.insert("master_seed".into(), cfg.master_seed.to_string());
        seeds.insert("derivation".into(), "splitmix64 over labelled paths from master_seed".into());
        seeds.insert("report".into(), master.child("report").seed().to_string());
        for r in 1..=cfg.n_runs as u64 {
            seeds.insert(format!("run/{r:02}"), master.child("run").index(r).seed().to_string());
        }
        RunManifest {
            tool: TOOL,
            version: VERSION,
            command: command.into(),
            args: BTreeMap::new(),
            config_sha256: cfg.sha256(),
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            result: None,
            config: serde_json::to_value(cfg).expect("config serialises"),
        }
    }

    pub fn arg(&mut self, k: &str, v: impl ToString) -> &mut Self {
        self.args.insert(k.into(), v.to_string());
        self
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<&mut Self, CliError> {
        if path.is_file() {
            self.inputs.insert(label.into(), sha256_file(path)?);
        } else {
            self.inputs.insert(label.into(), format!("dir:{}", path.display()));
        }
        Ok(self)
    }

    /// Records an output file by name relative to `dir` with its digest.
    pub fn output(&mut self, dir: &Path, path: &Path) -> Result<&mut Self, CliError> {
        let rel = path.strip_prefix(dir).unwrap_or(path).display().to_string();
        self.outputs.insert(rel, sha256_file(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(self).stage("manifest", Some(path))?;
        std::fs::write(path, text + "\n").stage("manifest", Some(path))?;
        Ok(path.to_path_buf())
    }
}
