//! Run manifests: the fully resolved config, every derived seed, the file
//! inventory, timings, and versions — enough to reproduce any number in the
//! output directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AkernError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub package: String,
    pub version: String,
    pub root_seed: u64,
    pub config: RunConfig,
    /// Named seed streams fanned out from the root seed.
    pub derived_seeds: BTreeMap<String, u64>,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
    /// Wall-clock runtime. The only non-reproducible field in the run
    /// directory; determinism checks compare everything else byte-for-byte.
    pub runtime_s: f64,
}

impl Manifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            command: command.to_string(),
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            root_seed: config.seed,
            config,
            derived_seeds: BTreeMap::new(),
            outputs: Vec::new(),
            runtime_s: 0.0,
        }
    }

    pub fn note_seed(&mut self, name: &str, seed: u64) {
        self.derived_seeds.insert(name.to_string(), seed);
    }

    pub fn note_output(&mut self, relative_path: &str) {
        self.outputs.push(relative_path.to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| AkernError::Config(e.to_string()))?;
        std::fs::write(out_dir.join("manifest.json"), text)?;
        Ok(())
    }
}
