//! Binary checkpoint container.
//!
//! Layout: the 4-byte magic `DNCK`, a little-endian `u64` header length, the
//! JSON header, then every array as little-endian `f64` values in header
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::NetError;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DNCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    /// Architecture and any model-specific settings.
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub arrays: Vec<CheckpointArray>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            seed,
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(CheckpointArray {
            name: name.to_string(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&CheckpointArray, NetError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| NetError::Checkpoint(format!("missing array {name:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), NetError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(NetError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NetError> {
        let mut offset = 0;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                    len: a.data.len(),
                };
                offset += a.data.len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let bad = |m: &str| NetError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(NetError::Checkpoint(format!("unsupported schema version {}", header.schema_version)));
        }
        let data = &bytes[12 + hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad("array shape does not match its length"));
            }
            let raw = data
                .get(8 * e.offset..8 * (e.offset + e.len))
                .ok_or_else(|| bad("truncated array data"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(CheckpointArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: values,
            });
        }
        Ok(Self {
            kind: header.kind,
            seed: header.seed,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
