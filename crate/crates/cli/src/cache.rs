//! On-disk layout of preprocessed tensors.
//!
//! ```text
//! <cache>/cache.json              index: config hash and source hashes
//! <cache>/domain_a/<file>.f32     tensor blobs, each with a .json sidecar
//! <cache>/domain_b/...
//! <cache>/domain_b_prime/...
//! <cache>/pair/a.f32, pair/b_prime.f32
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use paca_core::blob::{read_json, sha256_hex};
use paca_core::data::{read_cached, ImageTensor, TransferPair};
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "cache.json";
pub const SETS: [&str; 3] = ["domain_a", "domain_b", "domain_b_prime"];
pub const PAIR_DIR: &str = "pair";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Blob path relative to the cache root.
    pub file: PathBuf,
    pub source: PathBuf,
    pub source_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub side: usize,
    /// Hash of the preprocessing settings per set (polarization differs by set).
    pub config_hashes: BTreeMap<String, String>,
    pub sets: BTreeMap<String, Vec<IndexEntry>>,
}

/// A loaded cache: named images per set and the optional transfer pair.
#[derive(Clone, Debug)]
pub struct Cache {
    pub root: PathBuf,
    pub index: CacheIndex,
    pub index_sha256: String,
    pub sets: BTreeMap<String, Vec<(String, ImageTensor)>>,
    pub pair: Option<TransferPair>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl Cache {
    pub fn load(root: &Path) -> Result<Self> {
        let index_path = root.join(INDEX_FILE);
        let bytes = std::fs::read(&index_path).map_err(|e| PacaError::io(&index_path, e))?;
        let index: CacheIndex = read_json(&index_path)?;
        let mut sets = BTreeMap::new();
        let mut pair_parts = BTreeMap::new();
        for (name, entries) in &index.sets {
            let mut imgs = Vec::with_capacity(entries.len());
            for e in entries {
                let (img, side) = read_cached(&root.join(&e.file))?;
                if side.source_sha256 != e.source_sha256 || img.side() != index.side {
                    return Err(PacaError::integrity(
                        e.file.display().to_string(),
                        "sidecar disagrees with cache index",
                    ));
                }
                imgs.push((stem(&e.source), img));
            }
            if name.starts_with("pair/") {
                pair_parts.insert(name.clone(), imgs.pop().map(|(_, i)| i));
            } else {
                sets.insert(name.clone(), imgs);
            }
        }
        let pair = match (pair_parts.remove("pair/a").flatten(), pair_parts.remove("pair/b_prime").flatten()) {
            (Some(a), Some(b_prime)) => Some(TransferPair { a, b_prime }),
            _ => None,
        };
        Ok(Self { root: root.to_path_buf(), index, index_sha256: sha256_hex(&bytes), sets, pair })
    }

    pub fn images(&self, set: &str) -> Result<Vec<ImageTensor>> {
        Ok(self.named(set)?.iter().map(|(_, i)| i.clone()).collect())
    }

    pub fn named(&self, set: &str) -> Result<&[(String, ImageTensor)]> {
        match self.sets.get(set) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(PacaError::Dataset(format!("cache {} has no images in {set}", self.root.display()))),
        }
    }

    pub fn require_pair(&self) -> Result<&TransferPair> {
        self.pair
            .as_ref()
            .ok_or_else(|| PacaError::Dataset(format!("cache {} has no transfer pair", self.root.display())))
    }
}
