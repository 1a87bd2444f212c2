//! Raw little-endian `f32` blobs and content hashing.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PacaError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    fs::write(path, f32_to_le_bytes(values)).map_err(|e| PacaError::io(path, e))
}

/// Reads a blob that must hold exactly `expected` values.
pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| PacaError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(PacaError::integrity(
            path.display().to_string(),
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(le_bytes_to_f32(&bytes))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text).map_err(|e| PacaError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PacaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PacaError::integrity(path.display().to_string(), format!("bad json: {e}")))
}

/// Canonical hash of a serializable value (its compact JSON encoding).
pub fn hash_json<T: serde::Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}
