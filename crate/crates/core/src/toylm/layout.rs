// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ModelConfig;

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
    /// Whether initialization draws from N(0, 0.02) (otherwise a constant).
    pub random_init: bool,
    /// Constant initial value when `random_init` is false.
    pub fill: f32,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Fixed parameter order.
///
/// `wte [V, d]`, `wpe [P, d]`, then per layer `ln1.g, ln1.b, w_qkv [d, 3d],
/// b_qkv, w_o [d, d], b_o, ln2.g, ln2.b, w_fc [d, 4d], b_fc, w_proj [4d, d],
/// b_proj`, then `lnf.g, lnf.b, w_out [d, V]`. Matrices are row-major with
/// the input dimension as rows. Checkpoints store tensors in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    next: usize,
}

impl Builder {
    fn push(&mut self, name: String, rows: usize, cols: usize, kind: Kind) -> usize {
        let offset = self.next;
        let (decay, random_init, fill) = match kind {
            Kind::Weight => (true, true, 0.0),
            Kind::Bias => (false, false, 0.0),
            Kind::Gain => (false, false, 1.0),
        };
        self.tensors.push(TensorSpec {
            name,
            offset,
            rows,
            cols,
            decay,
            random_init,
            fill,
        });
        self.next += rows * cols;
        offset
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Weight,
    Bias,
    Gain,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff();
        let mut b = Builder {
            tensors: Vec::new(),
            next: 0,
        };
        let wte = b.push("wte".into(), cfg.vocab_size, d, Kind::Weight);
        let wpe = b.push("wpe".into(), cfg.max_seq_len, d, Kind::Weight);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: b.push(p("ln1.g"), 1, d, Kind::Gain),
                ln1_b: b.push(p("ln1.b"), 1, d, Kind::Bias),
                w_qkv: b.push(p("w_qkv"), d, 3 * d, Kind::Weight),
                b_qkv: b.push(p("b_qkv"), 1, 3 * d, Kind::Bias),
                w_o: b.push(p("w_o"), d, d, Kind::Weight),
                b_o: b.push(p("b_o"), 1, d, Kind::Bias),
                ln2_g: b.push(p("ln2.g"), 1, d, Kind::Gain),
                ln2_b: b.push(p("ln2.b"), 1, d, Kind::Bias),
                w_fc: b.push(p("w_fc"), d, f, Kind::Weight),
                b_fc: b.push(p("b_fc"), 1, f, Kind::Bias),
                w_proj: b.push(p("w_proj"), f, d, Kind::Weight),
                b_proj: b.push(p("b_proj"), 1, d, Kind::Bias),
            });
        }
        let lnf_g = b.push("lnf.g".into(), 1, d, Kind::Gain);
        let lnf_b = b.push("lnf.b".into(), 1, d, Kind::Bias);
        let w_out = b.push("w_out".into(), d, cfg.vocab_size, Kind::Weight);
        Self {
            total: b.next,
            tensors: b.tensors,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_out,
        }
    }
}
