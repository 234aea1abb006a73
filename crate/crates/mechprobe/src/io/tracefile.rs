// SPDX-License-Identifier: MIT OR Apache-2.0

//! Simplified-attention trace files.
//!
//! Header: the 8 bytes `MPROBE01`, `u32` version 1, `u8` kind
//! (0 last-token, 1 head-pooled, 2 cross-hypernode, 3 cross-pooled),
//! `u16` layers, `u16` heads (1 when pooled), `u32` record count. Each record
//! is a `u64` example id, a `u32` width and `layers * heads * width` `f32`
//! values, layer-major then head-major. All integers are little-endian.

use std::path::Path;

use mechprobe_core::trace::{SimplifiedAttention, TraceKind};

use super::bytes::{put_f32s, Cursor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MPROBE01";
pub const VERSION: u32 = 1;

pub fn kind_code(kind: TraceKind) -> Option<u8> {
    match kind {
        TraceKind::LastToken => Some(0),
        TraceKind::HeadPooled => Some(1),
        TraceKind::CrossHypernode => Some(2),
        TraceKind::CrossPooled => Some(3),
        TraceKind::RankPermuted => None,
    }
}

pub fn kind_from_code(code: u8) -> Option<TraceKind> {
    [
        TraceKind::LastToken,
        TraceKind::HeadPooled,
        TraceKind::CrossHypernode,
        TraceKind::CrossPooled,
    ]
    .get(code as usize)
    .copied()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub kind: TraceKind,
    pub n_layers: usize,
    pub n_heads: usize,
    pub traces: Vec<SimplifiedAttention>,
}

impl TraceSet {
    /// Collect traces that all share one kind and shape.
    pub fn new(
        kind: TraceKind,
        n_layers: usize,
        n_heads: usize,
        traces: Vec<SimplifiedAttention>,
    ) -> mechprobe_core::Result<Self> {
        for (i, t) in traces.iter().enumerate() {
            if (t.kind, t.n_layers, t.n_heads) != (kind, n_layers, n_heads) {
                return Err(mechprobe_core::Error::Input(format!(
                    "trace {i} is {:?} {}x{}, expected {kind:?} {n_layers}x{n_heads}",
                    t.kind, t.n_layers, t.n_heads
                )));
            }
        }
        Ok(Self {
            kind,
            n_layers,
            n_heads,
            traces,
        })
    }
}

pub fn encode_traces(set: &TraceSet) -> Result<Vec<u8>> {
    let bad = |m: String| Error::Core(mechprobe_core::Error::Input(m));
    let code = kind_code(set.kind)
        .ok_or_else(|| bad(format!("{:?} traces cannot be stored", set.kind)))?;
    let l = u16::try_from(set.n_layers).map_err(|_| bad("too many layers".into()))?;
    let h = u16::try_from(set.n_heads).map_err(|_| bad("too many heads".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(code);
    out.extend_from_slice(&l.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&(set.traces.len() as u32).to_le_bytes());
    for (i, t) in set.traces.iter().enumerate() {
        let id = t
            .provenance
            .example_id
            .ok_or_else(|| bad(format!("trace {i} has no example id")))?;
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&(t.width as u32).to_le_bytes());
        put_f32s(&mut out, &t.values);
    }
    Ok(out)
}

pub fn decode_traces(bytes: &[u8], path: &Path) -> Result<TraceSet> {
    let fail = |m: String| Error::format(path, m);
    let mut c = Cursor::new(bytes);
    if c.take(8, "magic").map_err(fail)? != MAGIC {
        return Err(fail("not a trace file (bad magic)".into()));
    }
    let version = c.u32("version").map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported trace version {version}")));
    }
    let code = c.u8("kind").map_err(fail)?;
    let kind = kind_from_code(code).ok_or_else(|| fail(format!("unknown trace kind {code}")))?;
    let l = c.u16("layer count").map_err(fail)? as usize;
    let h = c.u16("head count").map_err(fail)? as usize;
    if l == 0 || h == 0 {
        return Err(fail(format!("empty shape {l}x{h}")));
    }
    if kind.is_pooled() && h != 1 {
        return Err(fail(format!(
            "{kind:?} traces must have one head slot, header says {h}"
        )));
    }
    let n = c.u32("record count").map_err(fail)? as usize;
    let mut traces = Vec::with_capacity(n.min(1 << 16));
    for r in 0..n {
        let id = c.u64("example id").map_err(fail)?;
        let width = c.u32("width").map_err(fail)? as usize;
        if width == 0 {
            return Err(fail(format!("record {r} has width 0")));
        }
        let values = c
            .f32s(l * h * width, "payload")
            .map_err(|m| fail(format!("record {r}: {m}")))?;
        let t = SimplifiedAttention::new(kind, l, h, width, values)
            .map_err(|e| fail(format!("record {r}: {e}")))?;
        traces.push(t.with_example(id));
    }
    c.finish().map_err(fail)?;
    Ok(TraceSet {
        kind,
        n_layers: l,
        n_heads: h,
        traces,
    })
}

pub fn write_traces(path: &Path, set: &TraceSet) -> Result<()> {
    std::fs::write(path, encode_traces(set)?).map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<TraceSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_traces(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> TraceSet {
        let a = SimplifiedAttention::new(
            TraceKind::HeadPooled,
            2,
            1,
            3,
            vec![0.5, 0.25, 0.25, 1.0, 0.0, 0.0],
        )
        .unwrap()
        .with_example(7);
        TraceSet::new(TraceKind::HeadPooled, 2, 1, vec![a]).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = encode_traces(&set()).unwrap();
        assert_eq!(&b[..8], b"MPROBE01");
        assert_eq!(b[12], 1);
        assert_eq!(b.len(), 8 + 4 + 1 + 2 + 2 + 4 + 8 + 4 + 6 * 4);
        assert_eq!(decode_traces(&b, Path::new("t")).unwrap(), set());
    }

    #[test]
    fn pooled_kind_with_many_heads_is_rejected() {
        let mut b = encode_traces(&set()).unwrap();
        b[15] = 4;
        assert!(decode_traces(&b, Path::new("t")).is_err());
    }

    #[test]
    fn rank_permuted_is_not_storable() {
        let t = SimplifiedAttention::new(TraceKind::RankPermuted, 1, 1, 2, vec![0.5, 0.5])
            .unwrap()
            .with_example(0);
        let s = TraceSet::new(TraceKind::RankPermuted, 1, 1, vec![t]).unwrap();
        assert!(encode_traces(&s).is_err());
    }
}
