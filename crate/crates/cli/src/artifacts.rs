//! Output directory handling. Every file a command produces is written
//! atomically and listed in `manifest.json` with its checksum and the hash
//! of the resolved config that produced it.

use std::path::{Path, PathBuf};

use polyboot::persist::{atomic_write, checksum_json, sha256_hex, write_json_pretty};
use polyboot::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub artifacts: Vec<ArtifactEntry>,
}

pub struct OutDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    /// Creates the directory and records the resolved config in it.
    pub fn create<C: Serialize>(root: &Path, command: &str, config: &C) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let config_hash = config_hash(config)?;
        let mut out = Self {
            root: root.to_path_buf(),
            manifest: Manifest { command: command.into(), config_hash, artifacts: Vec::new() },
        };
        let prior = read_manifest(root).ok();
        if let Some(p) = prior.filter(|p| p.command == command && p.config_hash == out.manifest.config_hash) {
            // a resumed run keeps the entries of files it does not rewrite
            out.manifest.artifacts = p.artifacts;
        }
        write_json_pretty(&root.join(CONFIG), config)?;
        out.record(CONFIG)?;
        Ok(out)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.path(rel), bytes)?;
        self.record(rel)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        write_json_pretty(&self.path(rel), value)?;
        self.record(rel)
    }

    /// Adds a file that was written by other means.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let bytes = std::fs::read(self.path(rel))?;
        let entry = ArtifactEntry { file: rel.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 };
        match self.manifest.artifacts.iter_mut().find(|e| e.file == rel) {
            Some(e) => *e = entry,
            None => self.manifest.artifacts.push(entry),
        }
        Ok(())
    }

    /// Writes the manifest; call after the last artifact.
    pub fn finish(mut self) -> Result<Manifest> {
        self.manifest.artifacts.sort_by(|a, b| a.file.cmp(&b.file));
        write_json_pretty(&self.root.join(MANIFEST), &self.manifest)?;
        Ok(self.manifest)
    }
}

/// Hash of the key-sorted JSON form, so it can be recomputed from the file.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    checksum_json(&serde_json::to_value(config)?)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(root.join(MANIFEST))
        .map_err(|e| Error::InvalidInput(format!("no manifest in {}: {e}", root.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))
}

/// Recomputes every listed checksum and the config hash.
pub fn check_manifest(root: &Path) -> Result<Manifest> {
    let m = read_manifest(root)?;
    for a in &m.artifacts {
        let bytes = std::fs::read(root.join(&a.file)).map_err(|e| Error::Integrity(format!("{}: {e}", a.file)))?;
        if sha256_hex(&bytes) != a.sha256 {
            return Err(Error::Integrity(format!("{} does not match its recorded checksum", a.file)));
        }
    }
    let config: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join(CONFIG))?)
        .map_err(|e| Error::Integrity(format!("unreadable config: {e}")))?;
    if config_hash(&config)? != m.config_hash {
        return Err(Error::Integrity("config.json does not match the recorded config hash".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutDir::create(dir.path(), "demo", &serde_json::json!({"seed": 1})).unwrap();
        out.write("a.txt", b"hello").unwrap();
        out.finish().unwrap();
        check_manifest(dir.path()).unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hellO").unwrap();
        assert!(matches!(check_manifest(dir.path()), Err(Error::Integrity(_))));
    }
}
