//! Flat tensor container used for parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPLTTNSR"
//! version    u32      1
//! json_len   u64      length of the manifest
//! manifest   json_len bytes of UTF-8 JSON
//! padding    zero bytes up to the next multiple of 8
//! blob       raw tensor data
//! ```
//!
//! The manifest lists `{name, shape, dtype, offset, nbytes}` per tensor, with
//! `offset` relative to the start of the blob, plus a free-form `meta` object.
//! Values are written as `f64`; `f32` entries are accepted on read.

use super::{Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

pub const MAGIC: &[u8; 8] = b"SPLTTNSR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named tensors plus metadata, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Container(msg.into())
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(bad(format!("duplicate tensor name `{name}`")));
            }
            let nbytes = (t.numel() * 8) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let manifest = Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 8 + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        while out.len() % 8 != 0 {
            out.push(0);
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse a container. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let json_end = usize::try_from(json_len)
            .ok()
            .and_then(|l| HEADER_LEN.checked_add(l))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..json_end])
            .map_err(|e| bad(format!("manifest: {e}")))?;
        let blob_start = json_end.div_ceil(8) * 8;
        let blob = bytes.get(blob_start..).unwrap_or(&[]);

        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if !seen.insert(e.name.clone()) {
                return Err(bad(format!("duplicate tensor name `{}`", e.name)));
            }
            let width = match e.dtype.as_str() {
                "f64" => 8usize,
                "f32" => 4,
                other => return Err(bad(format!("unsupported dtype `{other}`"))),
            };
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("shape of `{}` overflows", e.name)))?;
            let expect = count
                .checked_mul(width)
                .ok_or_else(|| bad(format!("size of `{}` overflows", e.name)))?;
            if e.nbytes != expect as u64 {
                return Err(bad(format!(
                    "`{}`: nbytes {} does not match shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
            let start = usize::try_from(e.offset).map_err(|_| bad("offset overflows"))?;
            let end = start
                .checked_add(expect)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| bad(format!("`{}` extends past end of data", e.name)))?;
            let raw = &blob[start..end];
            let data: Vec<f64> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            };
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let bytes = self
            .to_bytes()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        std::fs::write(path, bytes)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }
}
