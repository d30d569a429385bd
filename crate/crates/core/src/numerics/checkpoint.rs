//! Checkpoint container: an 8-byte little-endian header length, a canonical
//! JSON header, then raw little-endian f64 payloads in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{atomic_write, canonical_json};

pub const FORMAT_VERSION: &str = "wclgen-ckpt-1";
pub const DTYPE_TAG: &str = "f64-le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_VERSION.to_string(),
            dtype: DTYPE_TAG.to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = canonical_json(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(8 + json.len() + payload);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::ingestion(origin, msg.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated checkpoint header"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint format {:?}", header.format)));
        }
        if header.dtype != DTYPE_TAG {
            return Err(bad(&format!("unsupported dtype {:?}", header.dtype)));
        }
        let mut off = 8 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(off..off + n * 8)
                .ok_or_else(|| bad(&format!("payload for {} is truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| err.annotate(format!("tensor {}", e.name)))?;
            tensors.push((e.name, t));
            off += n * 8;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after last payload"));
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
