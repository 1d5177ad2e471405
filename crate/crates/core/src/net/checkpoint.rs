//! Checkpoint files: one JSON header line, then the little-endian f32 payload.
//!
//! ```text
//! {"format":"sdlm-ckpt-v1","config":{...},"task":"copy","tensors":[...],"payload_bytes":N}\n
//! <N bytes of f32 LE, tensors in manifest order>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::manifest;
use super::{ModelConfig, Parameters, TensorSpec};
use crate::{Result, SdlmError};

pub const CKPT_FORMAT: &str = "sdlm-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    task: Option<String>,
    tensors: Vec<TensorSpec>,
    payload_bytes: usize,
}

/// Weights plus the task whose vocabulary they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub task: Option<String>,
}

pub fn save_checkpoint(path: &Path, params: &Parameters<f32>, task: Option<&str>) -> Result<()> {
    fs::write(path, encode(params, task)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| SdlmError::Checkpoint { path: path.to_path_buf(), reason })
}

fn encode(params: &Parameters<f32>, task: Option<&str>) -> Result<Vec<u8>> {
    let header = Header {
        format: CKPT_FORMAT.to_string(),
        config: *params.config(),
        task: task.map(str::to_string),
        tensors: params.specs().to_vec(),
        payload_bytes: params.num_params() * 4,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(header.payload_bytes);
    for x in params.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
    let header: Header =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| format!("bad header: {e}"))?;
    if header.format != CKPT_FORMAT {
        return Err(format!("format {:?}, expected {CKPT_FORMAT:?}", header.format));
    }
    header.config.validate().map_err(|e| e.to_string())?;
    if header.tensors != manifest(&header.config) {
        return Err("tensor manifest does not match config".into());
    }
    let payload = &bytes[newline + 1..];
    let expected: usize = header.tensors.iter().map(|t| t.len() * 4).sum();
    if header.payload_bytes != expected {
        return Err(format!("header declares {} payload bytes, manifest needs {expected}", header.payload_bytes));
    }
    if payload.len() != expected {
        return Err(format!("payload is {} bytes, expected {expected}", payload.len()));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = Parameters::from_parts(header.config, data).map_err(|e| e.to_string())?;
    Ok(Checkpoint { params, task: header.task })
}
