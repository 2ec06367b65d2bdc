//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "LCNNCKPT"
//! 8       8     header length H, u64 little-endian
//! 16      H     UTF-8 JSON header {"format_version", "seed", "config", "blocks"}
//! 16+H    8·N   parameter values, f64 little-endian, blocks in header order,
//!               each block row-major over its shape
//! ```
//!
//! Block order is conv_weight `[out, in, kernel]`, conv_bias `[out]`,
//! fc_weight `[classes, out]`, fc_bias `[classes]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, BLOCK_NAMES};

pub const MAGIC: &[u8; 8] = b"LCNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub blocks: Vec<BlockInfo>,
}

fn block_shapes(config: &ModelConfig) -> [Vec<usize>; 4] {
    [
        vec![config.out_channels, config.in_channels, config.kernel],
        vec![config.out_channels],
        vec![config.classes, config.out_channels],
        vec![config.classes],
    ]
}

pub fn to_bytes(params: &ModelParams, seed: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        seed,
        config: params.config,
        blocks: BLOCK_NAMES
            .iter()
            .zip(block_shapes(&params.config))
            .map(|(name, shape)| BlockInfo {
                name: (*name).to_owned(),
                shape,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n_values: usize = params.blocks().iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for block in params.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let expected: Vec<BlockInfo> = BLOCK_NAMES
        .iter()
        .zip(block_shapes(&header.config))
        .map(|(name, shape)| BlockInfo {
            name: (*name).to_owned(),
            shape,
        })
        .collect();
    if header.blocks != expected {
        return Err(bad(format!(
            "block layout {:?} does not match config",
            header.blocks
        )));
    }

    let mut params = ModelParams::zeros(header.config).map_err(|e| bad(e.to_string()))?;
    let n_values: usize = params.blocks().iter().map(|b| b.len()).sum();
    let body = &bytes[body_start..];
    if body.len() != 8 * n_values {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            8 * n_values,
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(8);
    for block in params.blocks_mut() {
        for (v, chunk) in block.iter_mut().zip(&mut chunks) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((params, header))
}

pub fn save(params: &ModelParams, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params, seed)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
