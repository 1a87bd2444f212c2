pub mod evaluate;
pub mod fixture;
pub mod infer;
pub mod preprocess;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use paca_core::blob::sha256_hex;
use paca_core::{PacaError, Result};
use serde::Serialize;

use crate::manifest::RunManifest;

/// Serializes the resolved config, prints it, and opens the run manifest.
pub fn begin<T: Serialize>(command: &str, cfg: &T) -> RunManifest {
    let value = serde_json::to_value(cfg).expect("config serializes");
    eprintln!("paca {command}: resolved config\n{}", serde_json::to_string_pretty(&value).expect("json"));
    RunManifest::start(command, value)
}

pub fn required<'a>(p: &'a Path, flag: &str) -> Result<&'a Path> {
    if p.as_os_str().is_empty() {
        return Err(PacaError::Config(format!("missing required {flag}")));
    }
    Ok(p)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PacaError::io(dir, e))
}

/// Hash of a checkpoint directory: the manifest pins every blob by sha256.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| PacaError::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Removes a stale file from an earlier run in the same directory.
pub fn remove_stale(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(PacaError::io(path, e)),
    }
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<PathBuf> {
    paca_core::blob::write_json(path, v)?;
    Ok(path.to_path_buf())
}
