//! Run manifests: every command records its resolved configuration, input
//! hashes, tool version, seed, and timestamps next to its outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use geotok_core::Result;

use crate::config::RunConfig;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input path -> content hash (hex).
    pub input_hashes: BTreeMap<String, String>,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.model.seed,
            config: config.clone(),
            input_hashes: BTreeMap::new(),
            started_at_unix: now(),
            finished_at_unix: 0,
        }
    }

    pub fn record_input(&mut self, path: impl AsRef<Path>, hash: u64) {
        self.input_hashes
            .insert(path.as_ref().display().to_string(), format!("{hash:016x}"));
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.finished_at_unix = now();
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(format!("manifest-{}.json", self.command));
        std::fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
