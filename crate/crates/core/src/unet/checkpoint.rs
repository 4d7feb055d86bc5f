//! Binary checkpoint: `b"FSEG"`, `u32` format version, `u32` header length, JSON header,
//! then every parameter as little-endian f32 in parameter order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, ModelParams, NamedParam, Placement};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: ArchitectureConfig,
    pub placement: Placement,
    pub seed: u64,
    pub epoch: usize,
    pub parameters: Vec<ParamEntry>,
}

pub fn encode_checkpoint(model: &ModelParams, epoch: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        architecture: model.config().clone(),
        placement: model.config().placement,
        seed: model.config().seed,
        epoch,
        parameters: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * model.num_scalars());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<(ModelParams, CheckpointHeader)> {
    let bad = |detail: String| Error::Format {
        path: origin.to_string(),
        detail,
    };
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing FSEG magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + header_len).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut blob = &bytes[12 + header_len..];
    let mut params = Vec::with_capacity(header.parameters.len());
    for entry in &header.parameters {
        let n: usize = entry.shape.iter().product();
        if blob.len() < 4 * n {
            return Err(bad(format!("parameter blob truncated at {}", entry.name)));
        }
        let data = blob[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blob = &blob[4 * n..];
        params.push(NamedParam {
            name: entry.name.clone(),
            tensor: Tensor::new(entry.shape.clone(), data)?,
        });
    }
    if !blob.is_empty() {
        return Err(bad(format!("{} trailing bytes", blob.len())));
    }
    let model = ModelParams::from_parts(header.architecture.clone(), params)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &ModelParams, epoch: usize) -> Result<()> {
    let bytes = encode_checkpoint(model, epoch)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
