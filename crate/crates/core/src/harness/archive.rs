//! Named-tensor archive used for checkpoints and feature dumps.
//!
//! Layout: magic `EIVT`, little-endian `u32` format version, `u32` header
//! length in bytes, a JSON header, then the raw little-endian payload. The
//! header holds `dtype` (`"f32"` or `"f64"`), free-form `meta`, and a table
//! of `{name, shape, offset}` entries with byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"EIVT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Decoded archive. Tensors are widened to `f64`, which is lossless for
/// either stored precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub precision: Precision,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, prefix removed, cast to `T`.
    pub fn with_prefix<T: Scalar>(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.cast())))
            .collect()
    }
}

fn dtype_name(bits: u32) -> &'static str {
    if bits == 64 {
        "f64"
    } else {
        "f32"
    }
}

/// Serialises `tensors` at the precision of `T`.
pub fn encode<T: Scalar>(meta: serde_json::Value, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let width = (T::BITS / 8) as usize;
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() * width;
    }
    let header = Header {
        dtype: dtype_name(T::BITS).into(),
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            if T::BITS == 64 {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            } else {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not an archive (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + hlen;
    if bytes.len() < payload_start {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| Error::Format(e.to_string()))?;
    let (precision, width) = match header.dtype.as_str() {
        "f32" => (Precision::F32, 4),
        "f64" => (Precision::F64, 8),
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} runs past the payload", e.name)));
        }
        let data: Vec<f64> = payload[e.offset..end]
            .chunks_exact(width)
            .map(|c| {
                if width == 8 {
                    f64::from_le_bytes(c.try_into().unwrap())
                } else {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                }
            })
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Archive {
        precision,
        meta: header.meta,
        tensors,
    })
}

pub fn save<T: Scalar>(path: &Path, meta: serde_json::Value, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode(meta, tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
