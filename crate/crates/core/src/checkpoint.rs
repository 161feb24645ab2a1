//! Binary model checkpoints.
//!
//! Layout: `b"LFC1"`, format version (u32 LE), header length (u32 LE), a UTF-8
//! JSON header, then every tensor as raw little-endian `f32` in table order.
//! The header holds the model spec, the class-name table and one entry per
//! tensor with its name, shape, byte offset and byte length into the payload,
//! plus its frozen flag.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{check_params, param_shapes, ModelParams, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LFC1";
pub const VERSION: u32 = 1;

/// Magic, version and header length.
const PREAMBLE: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),

    #[error("truncated header: need {needed} bytes, file has {available}")]
    TruncatedHeader { needed: usize, available: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("truncated payload in tensor {tensor:?}")]
    TruncatedPayload { tensor: String },

    #[error("header lists {header} tensors but the model needs {expected}")]
    CountMismatch { header: usize, expected: usize },

    #[error("tensor {tensor:?}: {reason}")]
    Layout { tensor: String, reason: String },

    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    class_names: Vec<String>,
    tensors: Vec<TableEntry>,
}

/// Everything a checkpoint file carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub class_names: Vec<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_params(&self.spec, &self.params)?;
        if self.class_names.len() != self.spec.classes {
            return Err(Error::Usage(format!(
                "{} class names for a {}-class model",
                self.class_names.len(),
                self.spec.classes
            )));
        }
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, p)| {
                let length = p.value.numel() * 4;
                let e = TableEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    length,
                    frozen: p.frozen,
                };
                offset += length;
                e
            })
            .collect();
        let header = Header {
            spec: self.spec.clone(),
            class_names: self.class_names.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(format!("checkpoint header: {e}")))?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Internal("checkpoint header too large".into()))?;

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::TruncatedHeader {
                needed: PREAMBLE,
                available: bytes.len(),
            }
            .into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
        let version = word(4);
        if version != VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        let header_end = PREAMBLE + word(8) as usize;
        if bytes.len() < header_end {
            return Err(CheckpointError::TruncatedHeader {
                needed: header_end,
                available: bytes.len(),
            }
            .into());
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        header
            .spec
            .validate()
            .map_err(|e| CheckpointError::Header(format!("invalid model spec: {e}")))?;
        if header.class_names.len() != header.spec.classes {
            return Err(CheckpointError::Header(format!(
                "{} class names for a {}-class model",
                header.class_names.len(),
                header.spec.classes
            ))
            .into());
        }
        let expected = param_shapes(&header.spec)?;
        if header.tensors.len() != expected.len() {
            return Err(CheckpointError::CountMismatch {
                header: header.tensors.len(),
                expected: expected.len(),
            }
            .into());
        }

        let payload = &bytes[header_end..];
        let mut params = ModelParams::new();
        let mut cursor = 0usize;
        for (entry, (want, shape)) in header.tensors.iter().zip(expected.iter()) {
            let layout = |reason: String| CheckpointError::Layout {
                tensor: entry.name.clone(),
                reason,
            };
            if &entry.name != want {
                return Err(layout(format!("expected tensor {want:?} at this position")).into());
            }
            if &entry.shape != shape {
                return Err(layout(format!("shape {:?} does not match the model's {shape:?}", entry.shape)).into());
            }
            let numel = entry.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)) != Some(entry.length) || entry.offset != cursor {
                return Err(layout(format!(
                    "offset {} length {} inconsistent with shape {:?} at payload position {cursor}",
                    entry.offset, entry.length, entry.shape
                ))
                .into());
            }
            let end = cursor.saturating_add(entry.length);
            let raw = payload.get(cursor..end).ok_or_else(|| CheckpointError::TruncatedPayload {
                tensor: entry.name.clone(),
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?, entry.frozen);
            cursor = end;
        }
        if payload.len() > cursor {
            return Err(CheckpointError::TrailingBytes(payload.len() - cursor).into());
        }
        Ok(Checkpoint {
            spec: header.spec,
            class_names: header.class_names,
            params,
        })
    }
}

pub fn save_checkpoint(params: &ModelParams, spec: &ModelSpec, class_names: &[String], path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        spec: spec.clone(),
        class_names: class_names.to_vec(),
        params: params.clone(),
    };
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
