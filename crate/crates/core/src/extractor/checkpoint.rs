//! Binary parameter checkpoints.
//!
//! Layout: the 8 magic bytes `SEPCKPT1`, a little-endian u64 header length,
//! the JSON header, then every weight and bias tensor (layer order, weights
//! before biases) as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, NetworkParams, NetworkSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEPCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub epoch: usize,
    pub tensor_lengths: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams, seed: u64, epoch: usize) -> Result<()> {
    let tensors: Vec<&Vec<f64>> = params.weights.iter().zip(&params.biases).flat_map(|(w, b)| [w, b]).collect();
    let header = CheckpointHeader {
        spec: params.spec.clone(),
        seed,
        epoch,
        tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * params.parameter_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Load parameters (momentum buffers reset to zero).
pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::validation(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut params = build_network(&header.spec)?;
    let mut data = bytes[16 + len..].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    if bytes[16 + len..].len() != 4 * params.parameter_count() {
        return Err(bad("tensor data does not match the network spec"));
    }
    for li in 0..params.layers.len() {
        for v in params.weights[li].iter_mut().chain(params.biases[li].iter_mut()) {
            *v = data.next().unwrap();
        }
    }
    Ok((params, header))
}
