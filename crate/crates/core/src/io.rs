//! Named-tensor files: a one-line JSON index followed by a little-endian `f32` payload.
//!
//! ```text
//! {"w":{"shape":[2,3],"byte_offset":0},"b":{"shape":[3],"byte_offset":24}}\n<payload>
//! ```
//! Offsets are relative to the first payload byte; tensors appear in index order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    byte_offset: usize,
}

/// Serializes tensors to bytes. Values are rounded to `f32`.
pub fn encode_tensors(tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut offset = 0;
    for (name, t) in tensors {
        if header.contains_key(*name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        let entry = Entry {
            shape: t.shape().to_vec(),
            byte_offset: offset,
        };
        header.insert((*name).to_string(), serde_json::to_value(entry)?);
        offset += t.numel() * 4;
    }
    let mut out = serde_json::to_vec(&Value::Object(header))?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in tensors {
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &bytes[split + 1..];
    let mut expected = 0;
    let mut out = Vec::with_capacity(header.len());
    for (name, entry) in header {
        let entry: Entry =
            serde_json::from_value(entry).map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
        let numel: usize = entry.shape.iter().product();
        if entry.byte_offset != expected {
            return Err(Error::Checkpoint(format!(
                "`{name}` starts at byte {}, expected {expected}",
                entry.byte_offset
            )));
        }
        let end = expected + numel * 4;
        let raw = payload
            .get(expected..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated inside `{name}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
        expected = end;
    }
    if expected != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_tensors(&bytes)
}
