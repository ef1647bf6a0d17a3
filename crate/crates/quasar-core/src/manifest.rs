//! Run manifests: every command records its inputs (by content digest),
//! seeds, tool version, and outputs, so artifact chains can be audited.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub timestamp_unix: u64,
    pub seeds: BTreeMap<String, u64>,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = crate::error::read_bytes(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of a directory: the sorted list of (file name, file digest) pairs,
/// hashed together.
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut entries: Vec<String> = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    for p in names {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        entries.push(format!("{name}:{}", sha256_file(&p)?));
    }
    Ok(hex::encode(Sha256::digest(entries.join("\n").as_bytes())))
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seeds: BTreeMap::new(),
            input_digests: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let digest = if path.is_dir() {
            sha256_dir(path)?
        } else {
            sha256_file(path)?
        };
        self.input_digests
            .insert(path.display().to_string(), digest);
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::error::read_file(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, b"hello").unwrap();
        let d1 = sha256_file(&f).unwrap();
        let d2 = sha256_file(&f).unwrap();
        assert_eq!(d1, d2);
        std::fs::write(&f, b"world").unwrap();
        assert_ne!(d1, sha256_file(&f).unwrap());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("in.json");
        std::fs::write(&f, b"{}").unwrap();
        let m = RunManifest::new("estimate")
            .seed("seed", 42)
            .input(&f)
            .unwrap()
            .output(&dir.path().join("out.json"));
        let mp = dir.path().join("run.manifest.json");
        m.write(&mp).unwrap();
        let back = RunManifest::read(&mp).unwrap();
        assert_eq!(back.command, "estimate");
        assert_eq!(back.seeds["seed"], 42);
        assert_eq!(back.input_digests.len(), 1);
    }
}
