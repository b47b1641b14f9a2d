//! Tensor blob format: concatenated little-endian f64 values, with shapes and
//! byte offsets recorded in a separate manifest.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.rows * self.cols * 8
    }
}

/// Serializes `tensors` in order; returns the blob and its manifest entries.
pub fn encode_tensors<'a, I>(tensors: I) -> (Vec<u8>, Vec<TensorEntry>)
where
    I: IntoIterator<Item = (String, &'a Matrix)>,
{
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset: blob.len(),
        });
        for v in m.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (blob, entries)
}

/// Inverse of [`encode_tensors`]. The blob length must match the manifest exactly.
pub fn decode_tensors(blob: &[u8], entries: &[TensorEntry]) -> Result<Vec<(String, Matrix)>> {
    let expected: usize = entries.iter().map(TensorEntry::byte_len).sum();
    if blob.len() != expected {
        return Err(Error::Checkpoint(format!(
            "tensor blob is {} bytes but manifest describes {expected}",
            blob.len()
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e.offset + e.byte_len();
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the blob", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)?));
    }
    Ok(out)
}
