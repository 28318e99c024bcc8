//! Atomic output files and the per-run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes a file, or every regular file directly inside a directory.
pub fn hash_inputs(path: &Path) -> Result<Vec<InputRecord>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_none_or(|n| n != MANIFEST_FILE))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .into_iter()
        .map(|f| {
            let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
            Ok(InputRecord {
                path: f.display().to_string(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// An output directory whose files are written through a temporary file and
/// renamed into place.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.dir.join(name);
        write_atomic(&target, bytes)?;
        self.written.push(name.to_string());
        Ok(target)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file that was written by other means.
    pub fn record(&mut self, name: impl Into<String>) {
        self.written.push(name.into());
    }

    pub fn finish<C: Serialize>(
        mut self,
        command: &str,
        seed: Option<u64>,
        config: &C,
        inputs: Vec<InputRecord>,
    ) -> Result<()> {
        let config = serde_json::to_value(config)?;
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            inputs,
            outputs: std::mem::take(&mut self.written),
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        Ok(())
    }
}

pub fn write_atomic(target: &Path, bytes: &[u8]) -> Result<()> {
    let dir = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(target).with_context(|| format!("writing {}", target.display()))?;
    Ok(())
}
