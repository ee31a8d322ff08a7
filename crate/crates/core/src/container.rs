//! Named-tensor container: magic, little-endian header length, JSON header
//! (manifest plus free-form metadata), then raw little-endian `f32` data.

use std::path::Path;

use bfr_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BFRTNSR1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
    meta: serde_json::Value,
}

pub fn encode(tensors: &ParamStore<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors.iter() {
        let length = t.numel() * 4;
        entries.push(Entry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&Header {
        entries,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a tensor container (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &bytes[header_end..];
    let mut store = ParamStore::new();
    let mut expected = 0;
    for e in &header.entries {
        let numel: usize = e.shape.iter().product();
        if e.dtype != "f32" {
            return Err(bad(format!(
                "entry {}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        if e.length != numel * 4 || e.offset != expected {
            return Err(bad(format!("entry {}: offset {} length {} do not match shape {:?} at expected offset {expected}", e.name, e.offset, e.length, e.shape)));
        }
        let Some(raw) = payload.get(e.offset..e.offset + e.length) else {
            return Err(bad(format!(
                "entry {}: payload ends at {} bytes, entry needs {}",
                e.name,
                payload.len(),
                e.offset + e.length
            )));
        };
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        expected += e.length;
    }
    if expected != payload.len() {
        return Err(bad(format!(
            "payload has {} bytes, manifest covers {expected}",
            payload.len()
        )));
    }
    Ok((store, header.meta))
}

pub fn write(path: &Path, tensors: &ParamStore<f32>, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(tensors, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
