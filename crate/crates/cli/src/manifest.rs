//! `run_manifest.json` written next to the outputs of `train` and `render`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dynfield::{Error, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub seed: Option<u64>,
    /// Configuration text as written to `config.txt`.
    pub config: Option<String>,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            version: env!("CARGO_PKG_VERSION"),
            seed: None,
            config: None,
            started: now(),
            finished: 0.0,
            artifacts: Vec::new(),
        }
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished = now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
