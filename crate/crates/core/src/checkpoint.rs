//! Binary container persistence for model checkpoints and datasets.
//!
//! Layout: 8 magic bytes, a little-endian u64 header length, a UTF-8 JSON
//! header, then the raw payload. Model checkpoints use magic `DCTCKPT1` with
//! header `{config, tensors: [{name, shape, byte_offset}]}`; the payload is
//! little-endian IEEE-754 f32, row-major, concatenated in manifest order with
//! offsets relative to the payload start. Saving is deterministic: the same
//! parameters always produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DctError, DctResult};
use crate::model::{ConditionerSource, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"DCTCKPT1";
pub const DATA_MAGIC: &[u8; 8] = b"DCTDATA1";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Write a container: magic, u64-LE header length, header JSON, payload.
pub fn write_container(
    path: &Path,
    magic: &[u8; 8],
    header_json: &[u8],
    payload: &[u8],
) -> DctResult<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(magic)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(header_json)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Read a container back, validating the magic bytes.
pub fn read_container(path: &Path, magic: &'static [u8; 8]) -> DctResult<(Vec<u8>, Vec<u8>)> {
    let mut file = File::open(path)?;
    let mut got_magic = [0u8; 8];
    file.read_exact(&mut got_magic).map_err(|_| DctError::CorruptContainer {
        message: "file shorter than the magic prefix".into(),
    })?;
    if &got_magic != magic {
        return Err(DctError::BadMagic {
            expected: std::str::from_utf8(magic).unwrap_or("container magic"),
        });
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|_| DctError::CorruptContainer {
        message: "missing header length".into(),
    })?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header).map_err(|_| DctError::CorruptContainer {
        message: "truncated header".into(),
    })?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    Ok((header, payload))
}

/// Persist model parameters and their config.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> DctResult<()> {
    let mut tensors = Vec::with_capacity(params.num_entries());
    let mut payload: Vec<u8> = Vec::new();
    for entry in params.entries() {
        tensors.push(TensorRecord {
            name: entry.name.clone(),
            shape: entry.tensor.shape().to_vec(),
            byte_offset: payload.len() as u64,
        });
        for v in entry.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CkptHeader { config: params.config.clone(), tensors };
    let header_json = serde_json::to_vec(&header).map_err(|e| DctError::CorruptContainer {
        message: format!("header serialization failed: {e}"),
    })?;
    write_container(path, CKPT_MAGIC, &header_json, &payload)
}

/// Load a checkpoint, validating the manifest against the payload and the
/// canonical parameter layout. Roundtrips are bitwise exact.
pub fn load_checkpoint(path: &Path) -> DctResult<ModelParams> {
    let (header_bytes, payload) = read_container(path, CKPT_MAGIC)?;
    let header: CkptHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| DctError::CorruptContainer {
            message: format!("header is not valid JSON: {e}"),
        })?;
    let source = if header.tensors.iter().any(|t| t.name.starts_with("static.")) {
        ConditionerSource::Static
    } else {
        ConditionerSource::Generator
    };
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for record in &header.tensors {
        let numel: usize = record.shape.iter().product();
        let start = record.byte_offset as usize;
        let end = start.checked_add(numel * 4).ok_or_else(|| DctError::TensorMismatch {
            name: record.name.clone(),
            message: "byte offset overflows".into(),
        })?;
        if end > payload.len() {
            return Err(DctError::TensorMismatch {
                name: record.name.clone(),
                message: format!(
                    "declared shape {:?} needs bytes {start}..{end} but payload has {}",
                    record.shape,
                    payload.len()
                ),
            });
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(record.shape.clone(), data).map_err(|e| {
            DctError::TensorMismatch { name: record.name.clone(), message: e.to_string() }
        })?;
        tensors.push((record.name.clone(), tensor));
    }
    ModelParams::from_entries(header.config, source, tensors)
}
