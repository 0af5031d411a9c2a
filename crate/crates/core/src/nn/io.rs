//! Model files: an 8-byte magic, the header length as a little-endian
//! `u64`, a JSON header (architecture, labels, training log and a weight
//! manifest with byte offsets) and a blob of little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchitectureSpec, EpochRecord, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DCAMNET1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ArchitectureSpec,
    dims: usize,
    class_labels: Vec<String>,
    training_log: Vec<EpochRecord>,
    weights: Vec<WeightEntry>,
    blob_bytes: u64,
    blob_sha256: String,
}

fn checksum(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

pub(crate) fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut weights = Vec::new();
    for (name, t) in model.params() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        weights.push(WeightEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        spec: model.spec().clone(),
        dims: model.dims(),
        class_labels: model.class_labels().to_vec(),
        training_log: model.training_log.clone(),
        weights,
        blob_bytes: blob.len() as u64,
        blob_sha256: checksum(&blob),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub(crate) fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a model file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(corrupt(format!("header length {header_len} exceeds file size")));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    let blob = &body[header_len..];
    if blob.len() as u64 != header.blob_bytes {
        return Err(corrupt(format!(
            "weight blob has {} bytes, manifest says {}",
            blob.len(),
            header.blob_bytes
        )));
    }
    if checksum(blob) != header.blob_sha256 {
        return Err(corrupt("weight blob checksum mismatch".into()));
    }
    let mut params = BTreeMap::new();
    for entry in &header.weights {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(entry.length);
        if entry.length != 4 * numel as u64 || end.is_none_or(|e| e > header.blob_bytes) {
            return Err(corrupt(format!(
                "manifest entry {} disagrees with the blob",
                entry.name
            )));
        }
        let raw = &blob[entry.offset as usize..(entry.offset + entry.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Model::from_parts(
        header.spec,
        header.dims,
        params,
        header.class_labels,
        header.training_log,
    )
    .map_err(|e| corrupt(e.to_string()))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
