//! `artifacts.json`: the config hash of a run and a digest of every file it
//! wrote, so a later `report` can detect edits and mismatches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cbamnet_core::hash::sha256_hex;
use cbamnet_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "artifacts.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub command: String,
    pub config_hash: String,
    /// Relative path → sha256 of the file contents.
    pub files: BTreeMap<String, String>,
}

impl ArtifactIndex {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            files: BTreeMap::new(),
        }
    }

    /// Writes `bytes` to `dir/name` and records its digest.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact serializes");
    out.push(b'\n');
    out
}
