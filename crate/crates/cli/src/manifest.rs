use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliResult, Common};

/// Provenance record written next to a command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_files: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Path → SHA-256 of every file the command read.
    pub inputs: BTreeMap<String, String>,
    /// File name inside the output directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

fn sha256(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Collects inputs and outputs of one artifact-producing command.
pub(crate) struct Run {
    argv: Vec<String>,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    pub fn start(argv: &[String], common: &Common) -> CliResult<Self> {
        let out = common.out_dir()?.to_path_buf();
        std::fs::create_dir_all(&out)?;
        let mut run = Self {
            argv: argv.to_vec(),
            out,
            config: common.config.clone(),
            seed: common.seed,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        if let (Some(path), Some(bytes)) = (&common.config, common.config_bytes()?) {
            run.inputs.insert(path.display().to_string(), sha256(bytes));
        }
        Ok(run)
    }

    /// Records the seed actually used when it came from a config file.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(path.display().to_string(), sha256(&bytes));
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes)?;
        self.outputs.insert(name.to_string(), sha256(bytes));
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Hashes a file some library routine already wrote into the output
    /// directory.
    pub fn record(&mut self, name: &str) -> CliResult<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.outputs.insert(name.to_string(), sha256(&bytes));
        Ok(())
    }

    pub fn finish(self) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            command: self.argv,
            config_files: self.config.iter().map(|p| p.display().to_string()).collect(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(self.out.join("manifest.json"), bytes)?;
        Ok(manifest)
    }
}
