//! One manifest per run: the resolved configuration, the seed, and hashes of
//! every file read or written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileRecord {
    pub fn of(path: &Path) -> CliResult<Self> {
        let data = std::fs::read(path).map_err(CliError::io(path))?;
        Ok(FileRecord {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Configuration after applying flag overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: u8,
    pub error: Option<String>,
}

/// What a command reports back for its manifest.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn config<T: Serialize>(&mut self, path: Option<&Path>, value: &T) {
        self.config_path = path.map(Path::to_path_buf);
        self.config = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
    }

    /// Hashes whatever inputs and outputs exist; failed runs may have skipped some.
    pub fn records(paths: &[PathBuf]) -> Vec<FileRecord> {
        paths.iter().filter_map(|p| FileRecord::of(p).ok()).collect()
    }
}

pub fn write(dir: &Path, manifest: &RunManifest) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(detdisc_core::Error::from)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"abc").unwrap();
        let r = FileRecord::of(&p).unwrap();
        assert_eq!(
            r.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(r.bytes, 3);
    }
}
