//! Run directories, config digests and file manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Compact serialization with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    let mut s = String::new();
    canonical(value, &mut s);
    s
}

/// SHA-256 (hex) of the canonical JSON form of `config`.
pub fn canonical_config_digest<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    Ok(sha256_hex(canonical_json(&value).as_bytes()))
}

/// Digest of a JSON document given as text; key order and whitespace are ignored.
pub fn digest_json_text(text: &str) -> Result<String> {
    let value: Value = serde_json::from_str(text)?;
    Ok(sha256_hex(canonical_json(&value).as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Create `dir`, refusing to touch an existing one unless `overwrite` is set.
pub fn prepare_run_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(Error::AlreadyExists(dir.display().to_string()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub size: u64,
    pub sha256: String,
}

/// Description of a finished run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub config_digest: String,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let bytes = fs::read(&path)?;
            let rel = path.strip_prefix(root).expect("under root");
            out.push(FileEntry {
                path: rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
                size: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    Ok(())
}

impl RunArtifacts {
    /// Scan `run_dir` and write its manifest.
    pub fn record(run_dir: &Path, config_digest: String) -> Result<Self> {
        let mut files = Vec::new();
        collect_files(run_dir, run_dir, &mut files)?;
        let artifacts = Self {
            run_dir: run_dir.to_path_buf(),
            config_digest,
            files,
        };
        fs::write(
            run_dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&artifacts)?,
        )?;
        Ok(artifacts)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(run_dir.join(MANIFEST_FILE))?)?)
    }

    /// Check every listed file against its recorded size and checksum.
    pub fn verify(&self) -> Result<()> {
        for f in &self.files {
            let bytes = fs::read(self.run_dir.join(&f.path))?;
            if bytes.len() as u64 != f.size || sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Integrity(format!("{} does not match the manifest", f.path)));
            }
        }
        Ok(())
    }
}
