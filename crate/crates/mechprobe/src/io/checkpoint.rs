// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model checkpoints.
//!
//! Layout: the 8 bytes `MPCKPT01`, a `u32` format version, a `u32` byte
//! length followed by the JSON model config, a `u64` parameter count, then
//! the parameters as `f32` in the order of the model's parameter layout
//! (token embeddings, positions, per-layer blocks, final norm, unembedding).
//! All integers are little-endian.

use std::path::Path;

use mechprobe_core::toylm::{Model, ModelConfig};

use super::bytes::{put_f32s, Cursor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MPCKPT01";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let cfg = serde_json::to_vec(model.config()).expect("model config serializes");
    let mut out = Vec::with_capacity(24 + cfg.len() + 4 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    put_f32s(&mut out, model.params());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let fail = |m: String| Error::format(path, m);
    let mut c = Cursor::new(bytes);
    if c.take(8, "magic").map_err(fail)? != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32("version").map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32("config length").map_err(fail)? as usize;
    let cfg: ModelConfig = serde_json::from_slice(c.take(len, "config").map_err(fail)?)
        .map_err(|e| fail(format!("config block: {e}")))?;
    let n = c.u64("parameter count").map_err(fail)?;
    let n = usize::try_from(n).map_err(|_| fail(format!("parameter count {n} too large")))?;
    let params = c.f32s(n, "parameters").map_err(fail)?;
    c.finish().map_err(fail)?;
    Ok(Model::from_params(cfg, params)?)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, optionally shrinking its positional table.
pub fn load_checkpoint(path: &Path, max_seq_len: Option<usize>) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = decode_checkpoint(&bytes, path)?;
    match max_seq_len {
        Some(t) => Ok(model.with_max_seq_len(t)?),
        None => Ok(model),
    }
}
