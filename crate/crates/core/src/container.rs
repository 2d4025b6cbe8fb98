//! Binary tensor container shared by weight files, dataset samples and
//! saliency sidecars.
//!
//! Layout: the 8-byte magic `PBALLWTS`, a little-endian `u64` header length,
//! a UTF-8 JSON header `{"meta": .., "tensors": [{name, shape, offset, count}]}`
//! and then the raw little-endian `f64` payloads in manifest order. Offsets
//! are in bytes from the start of the payload section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PBALLWTS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes `meta` and the named tensors into container bytes.
pub fn encode(meta: &Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            count: t.len(),
        });
        offset += t.len() * 8;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses container bytes. `path` is only used for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(path, "bad magic, not a PBALLWTS container"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(hlen)
        .ok_or_else(|| Error::format(path, "header length overflows"))?;
    if bytes.len() < payload_start {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: payload_start,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::format(path, format!("header json: {e}")))?;
    let payload = &bytes[payload_start..];
    let needed = header
        .tensors
        .iter()
        .map(|e| e.offset + e.count * 8)
        .max()
        .unwrap_or(0);
    if payload.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: payload_start + needed,
            found: bytes.len(),
        });
    }
    if payload.len() > needed {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", payload.len() - needed),
        ));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.shape.iter().product::<usize>() != e.count {
            return Err(Error::format(
                path,
                format!("tensor {} shape {:?} disagrees with count {}", e.name, e.shape, e.count),
            ));
        }
        let raw = &payload[e.offset..e.offset + e.count * 8];
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((header.meta, tensors))
}

pub fn write(path: &Path, meta: &Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::from_vec(vec![0.1; 3]);
        encode(&json!({"k": 1}), &[("a".into(), &a), ("b".into(), &b)]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let (meta, ts) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(ts[0].0, "a");
        let bits: Vec<u64> = ts[0].1.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits[1], (-0.0f64).to_bits());
        assert_eq!(ts[1].1.data(), &[0.1; 3]);
    }

    #[test]
    fn truncation_and_magic_detected() {
        let bytes = sample();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(cut, Path::new("m")), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&bytes[..10], Path::new("m")), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, Path::new("m")), Err(Error::Format { .. })));
    }
}
