use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved config as a flat TOML document.
    pub config: String,
    pub seed: u64,
    /// Command arguments other than the config (data paths, K).
    pub args: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    /// Content hash over the input list.
    pub input_hash: String,
    pub out_dir: String,
    pub threads: usize,
    pub status: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Files written by the command, relative to `out_dir`. Hashes of CSV
    /// files skip any `wall_ms` column.
    pub artifacts: Vec<FileHash>,
}

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub fn hash_inputs(inputs: &[FileHash]) -> String {
    let listing: String = inputs.iter().map(|f| format!("{} {}\n", f.sha256, f.path)).collect();
    io::content_hash(listing.as_bytes())
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s.into_bytes()
    }

    pub fn artifact(&self, name: &str) -> Option<&FileHash> {
        self.artifacts.iter().find(|a| a.path == name)
    }
}
