//! Per-run provenance record; `paca replay` re-issues a run from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use paca_core::blob::sha256_hex;
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_FORMAT: &str = "paca-run/1";
pub const RUN_FILE: &str = "run.json";

/// Content hash of the sources this binary was built from.
pub const CODE_HASH: &str = env!("PACA_CODE_HASH");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub version: String,
    pub code_hash: String,
    /// Fully resolved configuration, sufficient to re-run the command.
    pub config: Value,
    /// Input path to sha256 of its content (or of its index file).
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: Value) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            code_hash: CODE_HASH.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    /// Records the hash of a file, hashing the file itself.
    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| PacaError::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn input_hash(&mut self, path: &Path, hash: String) {
        self.inputs.insert(path.display().to_string(), hash);
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Writes `run.json` into `dir` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = now_ms();
        std::fs::create_dir_all(dir).map_err(|e| PacaError::io(dir, e))?;
        let path = dir.join(RUN_FILE);
        let tmp = dir.join(format!(".{RUN_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&tmp, text).map_err(|e| PacaError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| PacaError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = paca_core::blob::read_json(path)?;
        if m.format != RUN_FORMAT {
            return Err(PacaError::integrity(path.display().to_string(), format!("unknown run format {:?}", m.format)));
        }
        Ok(m)
    }
}
