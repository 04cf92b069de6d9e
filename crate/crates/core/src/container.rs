//! Binary container shared by model and tokenizer checkpoints:
//!
//! ```text
//! magic[8] | version u32 | header_len u64 | header JSON | f64 LE payload | sha256[32]
//! ```
//!
//! The header carries free-form metadata plus a tensor index (name, shape,
//! offset into the payload in elements). The digest covers every preceding
//! byte. Serialization is deterministic, so save, load, save yields identical
//! bytes.

use musa_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MusaError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MusaError::CorruptCheckpoint(format!("missing tensor {name}")))
    }
}

pub fn encode(magic: &[u8; 8], version: u32, meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut offset = 0;
    let index: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: index,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + offset * 8 + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(magic: &[u8; 8], version: u32, bytes: &[u8]) -> Result<Container> {
    let corrupt = |m: &str| MusaError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != magic {
        return Err(corrupt("bad magic"));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(MusaError::VersionMismatch { found, expected: version });
    }
    let body = &bytes[..bytes.len() - 32];
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    let payload = &body[header_end..];
    if payload.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = values.get(e.offset..e.offset + n).ok_or_else(|| corrupt("tensor index overruns payload"))?;
        tensors.push((e.name, Tensor::new(e.shape, data.to_vec())));
    }
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}
