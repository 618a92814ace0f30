use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    /// Git-style object hash (`sha256` of `blob <len>\0<config>`).
    pub config_hash: String,
    pub output_dir: String,
    pub started_at: String,
    pub finished_at: String,
    pub version: String,
}

pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct ManifestBuilder {
    command: &'static str,
    started_at: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub config_text: String,
}

impl ManifestBuilder {
    pub fn start(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            started_at: now(),
            config_path: None,
            seed: None,
            config_text: String::new(),
        }
    }

    pub fn write(self, out_dir: &Path) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: self.config_path,
            seed: self.seed,
            config_hash: content_hash(&self.config_text),
            output_dir: out_dir.display().to_string(),
            started_at: self.started_at,
            finished_at: now(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        pcodom::tensor::write_atomic(&out_dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
        Ok(())
    }
}
