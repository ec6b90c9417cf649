//! Checkpoint layout: 8-byte magic, little-endian `u64` header length, JSON
//! header (config, tensor table, SHA-256 of the payload), then every tensor
//! as raw little-endian `f64` in table order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::param_layout;
use super::{LMConfig, LMModel, LmError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GCNFLM01";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: LMConfig,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

pub(crate) fn payload_bytes<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn checkpoint_bytes(model: &LMModel) -> Vec<u8> {
    let payload = payload_bytes(model.params().iter().map(Tensor::data));
    let header = Header {
        version: VERSION,
        config: model.config().clone(),
        tensors: model
            .names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| TensorEntry {
                name: n.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
        sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<LMModel> {
    let fmt = |m: &str| LmError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(fmt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fmt(&format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(LmError::Checkpoint(format!(
            "version {} unsupported (expected {VERSION})",
            header.version
        )));
    }
    let payload = &body[hlen..];
    if sha256_hex(payload) != header.sha256 {
        return Err(LmError::Checksum);
    }
    header.config.validate()?;
    let expected = param_layout(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(fmt(&format!(
            "{} tensors stored, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(expected.len());
    let mut off = 0;
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(LmError::ShapeMismatch {
                tensor: entry.name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        let raw = payload.get(off * 8..(off + n) * 8).ok_or(LmError::Checksum)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(shape.clone(), data)?.param());
        off += n;
    }
    if off * 8 != payload.len() {
        return Err(fmt("trailing payload bytes"));
    }
    Ok(LMModel::from_parts(header.config, params))
}

pub fn save_checkpoint(model: &LMModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| LmError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<LMModel> {
    let bytes = std::fs::read(path).map_err(|e| LmError::Io(format!("{}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}
