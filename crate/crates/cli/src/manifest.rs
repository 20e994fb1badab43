use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use navmem::artifacts::{config_hash, write_atomic};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new<S: Serialize>(command: &str, args: &S, seed: u64) -> CliResult<Self> {
        Ok(Self {
            command: command.to_owned(),
            config_hash: config_hash(args)?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            wall_clock_s: 0.0,
        })
    }

    /// `manifest.json` inside an output directory.
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    /// `name.manifest.json` beside a single output file.
    pub fn path_beside(file: &Path) -> PathBuf {
        file.with_extension("manifest.json")
    }

    /// Stamps the elapsed time and writes the manifest to `path`.
    pub fn finish(mut self, path: PathBuf, started: Instant) -> CliResult<PathBuf> {
        self.wall_clock_s = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self).map_err(navmem::error::Error::from)? + "\n";
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| crate::CliError::Missing(path.to_owned()))?;
        serde_json::from_str(&text).map_err(|e| crate::CliError::Malformed(format!("{}: {e}", path.display())))
    }
}
