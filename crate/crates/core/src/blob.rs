//! Little-endian 32-bit blob files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads exactly `len` floats, widening to f64.
pub fn read_f32(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = read_exact(path, len)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_u32(path: &Path, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_u32(path: &Path, len: usize) -> Result<Vec<u32>> {
    let bytes = read_exact(path, len)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Size of a blob in 4-byte words, failing on a ragged tail.
pub fn word_count(path: &Path) -> Result<usize> {
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len() as usize;
    if !len.is_multiple_of(4) {
        return Err(Error::TruncatedBlob {
            path: path.to_path_buf(),
            expected: len.next_multiple_of(4),
            found: len,
        });
    }
    Ok(len / 4)
}

fn read_exact(path: &Path, len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != len * 4 {
        return Err(Error::TruncatedBlob {
            path: path.to_path_buf(),
            expected: len * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::SchemaMismatch(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))
}
