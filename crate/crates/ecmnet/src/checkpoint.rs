//! Checkpoint container: named f32 arrays (weights, buffers, optimizer
//! moments) with a shape manifest, config hash, iteration counter and metric
//! snapshot.
//!
//! Layout: magic, little-endian u64 header length, JSON header, raw f32
//! little-endian payload. Byte-exact round trip of every array.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ECMCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("payload truncated: wanted {wanted} floats at offset {offset}")]
    Truncated { wanted: usize, offset: usize },
    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    ConfigHashMismatch { found: String, expected: String },
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    section: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    iteration: u64,
    opt_step: u64,
    metric_snapshot: Option<f64>,
    arrays: Vec<ArrayEntry>,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub config_hash: String,
    pub iteration: u64,
    pub opt_step: u64,
    pub metric_snapshot: Option<f64>,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub buffers: BTreeMap<String, Tensor<f32>>,
    pub opt_m: BTreeMap<String, Tensor<f32>>,
    pub opt_v: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut arrays = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let push_section = |section: &str,
                                map: &BTreeMap<String, Tensor<f32>>,
                                arrays: &mut Vec<ArrayEntry>,
                                payload: &mut Vec<f32>| {
            for (name, t) in map {
                arrays.push(ArrayEntry {
                    name: name.clone(),
                    section: section.to_string(),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                });
                payload.extend_from_slice(t.data());
            }
        };
        push_section("params", &self.params, &mut arrays, &mut payload);
        push_section("buffers", &self.buffers, &mut arrays, &mut payload);
        push_section("opt_m", &self.opt_m, &mut arrays, &mut payload);
        push_section("opt_v", &self.opt_v, &mut arrays, &mut payload);

        let header = Header {
            format_version: 1,
            config_hash: self.config_hash.clone(),
            iteration: self.iteration,
            opt_step: self.opt_step,
            metric_snapshot: self.metric_snapshot,
            arrays,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(MAGIC).map_err(io_err)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        file.write_all(&header_json).map_err(io_err)?;
        let mut bytes = Vec::with_capacity(payload.len() * 4);
        for v in &payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = std::fs::File::open(path).map_err(io_err)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(io_err)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        let mut rest = Vec::new();
        file.read_to_end(&mut rest).map_err(io_err)?;
        let floats: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut out = Checkpoint {
            config_hash: header.config_hash,
            iteration: header.iteration,
            opt_step: header.opt_step,
            metric_snapshot: header.metric_snapshot,
            ..Checkpoint::default()
        };
        for entry in header.arrays {
            let numel: usize = entry.shape.iter().product();
            if entry.offset + numel > floats.len() {
                return Err(CheckpointError::Truncated {
                    wanted: numel,
                    offset: entry.offset,
                });
            }
            let t = Tensor::new(
                &entry.shape,
                floats[entry.offset..entry.offset + numel].to_vec(),
            );
            let map = match entry.section.as_str() {
                "params" => &mut out.params,
                "buffers" => &mut out.buffers,
                "opt_m" => &mut out.opt_m,
                "opt_v" => &mut out.opt_v,
                other => {
                    return Err(CheckpointError::BadHeader(format!(
                        "unknown section {other}"
                    )))
                }
            };
            map.insert(entry.name, t);
        }
        Ok(out)
    }

    /// Fail when this checkpoint was produced under a different config.
    pub fn verify_config(&self, expected_hash: &str) -> Result<(), CheckpointError> {
        if self.config_hash != expected_hash {
            return Err(CheckpointError::ConfigHashMismatch {
                found: self.config_hash.clone(),
                expected: expected_hash.to_string(),
            });
        }
        Ok(())
    }
}
