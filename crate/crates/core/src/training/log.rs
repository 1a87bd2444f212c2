use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Stage;
use crate::error::{PacaError, Result};
use crate::losses::{LossTerms, Objective};

/// One JSON line per optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub terms: LossTerms,
    pub totals: Objective,
}

pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    /// Opens `path` for appending so resumed runs extend the same log.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PacaError::io(dir, e))?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| PacaError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.out, "{line}").map_err(|e| PacaError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| PacaError::io(&self.path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<StepRecord>> {
        let f = File::open(path).map_err(|e| PacaError::io(path, e))?;
        BufReader::new(f)
            .lines()
            .map(|l| {
                let l = l.map_err(|e| PacaError::io(path, e))?;
                serde_json::from_str(&l)
                    .map_err(|e| PacaError::MalformedInput { path: path.to_path_buf(), reason: e.to_string() })
            })
            .collect()
    }
}

impl Drop for LossLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
