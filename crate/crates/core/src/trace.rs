// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention tensors and their simplifications.
//!
//! A full [`AttentionTensor`] holds `L x H x T x T` post-softmax weights. The
//! probe never looks at all of it: it works on the last token's row
//! ([`last_token_slice`]), optionally averaged over heads ([`pool_heads`]),
//! re-ordered by the size of the numbers ([`rank_permute`]) or collapsed to
//! one slot per multi-token statement ([`cross_pool`]).

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::taskgen::{Dataset, Example};
use crate::toylm::{Model, PruneMask, Real};

/// Post-softmax attention of one forward pass, indexed `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    values: Vec<f32>,
}

impl AttentionTensor {
    pub fn from_raw(
        n_layers: usize,
        n_heads: usize,
        seq_len: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != n_layers * n_heads * seq_len * seq_len {
            bail!(
                Input,
                "attention payload of {} values does not match {n_layers}x{n_heads}x{seq_len}x{seq_len}",
                values.len()
            );
        }
        Ok(Self {
            n_layers,
            n_heads,
            seq_len,
            values,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let t = self.seq_len;
        &self.values[((layer * self.n_heads + head) * t + query) * t..][..t]
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.row(layer, head, query)[key]
    }

    /// Check the causal zero pattern and that every row sums to 1 within `tol`.
    pub fn validate(&self, tol: f32) -> Result<()> {
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for i in 0..self.seq_len {
                    let row = self.row(l, h, i);
                    if row[i + 1..].iter().any(|&v| v != 0.0) {
                        bail!(
                            Data,
                            "attention ({l}, {h}) row {i} attends to a future position"
                        );
                    }
                    if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                        bail!(
                            Data,
                            "attention ({l}, {h}) row {i} has a weight outside [0, 1]"
                        );
                    }
                    let s: f32 = row.iter().sum();
                    if (s - 1.0).abs() > tol {
                        bail!(Data, "attention ({l}, {h}) row {i} sums to {s}");
                    }
                }
            }
        }
        Ok(())
    }

    /// Head-averaged `T x T` matrix of one layer.
    pub fn pooled_layer(&self, layer: usize) -> Vec<f64> {
        let t = self.seq_len;
        let mut out = vec![0.0f64; t * t];
        for h in 0..self.n_heads {
            let block = &self.values[(layer * self.n_heads + h) * t * t..][..t * t];
            for (o, &v) in out.iter_mut().zip(block) {
                *o += v as f64;
            }
        }
        let inv = 1.0 / self.n_heads as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    /// `L x H x T`: the last query row of every head.
    LastToken,
    /// `L x T`: last-token rows averaged over heads.
    HeadPooled,
    /// `L x H x T` or `L x T` with columns ordered by rank instead of position.
    RankPermuted,
    /// `L x H x (|S| + 1)`: one slot per statement plus one for the question.
    CrossHypernode,
    /// `L x (|S| + 1)`: cross-statement slots averaged over heads.
    CrossPooled,
}

impl TraceKind {
    pub fn is_pooled(self) -> bool {
        matches!(self, TraceKind::HeadPooled | TraceKind::CrossPooled)
    }
}

/// A step applied to produce a simplified trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    LastToken,
    PoolHeads { kept: Option<Vec<(usize, usize)>> },
    RankPermute,
    CrossPool,
    Prefix(usize),
    Mean(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub example_id: Option<u64>,
    pub transforms: Vec<Transform>,
}

/// A reduced attention trace, stored `[layer][head][index]` (head axis of size 1 when pooled).
#[derive(Debug, Clone, PartialEq)]
pub struct SimplifiedAttention {
    pub kind: TraceKind,
    pub n_layers: usize,
    pub n_heads: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl SimplifiedAttention {
    pub fn new(
        kind: TraceKind,
        n_layers: usize,
        n_heads: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != n_layers * n_heads * width {
            bail!(
                Input,
                "trace payload {} does not match {n_layers}x{n_heads}x{width}",
                values.len()
            );
        }
        if kind.is_pooled() && n_heads != 1 {
            bail!(
                Input,
                "pooled traces have a single head slot, got {n_heads}"
            );
        }
        Ok(Self {
            kind,
            n_layers,
            n_heads,
            width,
            values,
            provenance: Provenance::default(),
        })
    }

    pub fn with_example(mut self, id: u64) -> Self {
        self.provenance.example_id = Some(id);
        self
    }

    pub fn get(&self, layer: usize, head: usize, index: usize) -> f32 {
        self.values[(layer * self.n_heads + head) * self.width + index]
    }

    pub fn slice(&self, layer: usize, head: usize) -> &[f32] {
        &self.values[(layer * self.n_heads + head) * self.width..][..self.width]
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.width == other.width
    }

    fn derived(
        &self,
        kind: TraceKind,
        n_layers: usize,
        n_heads: usize,
        width: usize,
        values: Vec<f32>,
        t: Transform,
    ) -> Self {
        let mut provenance = self.provenance.clone();
        provenance.transforms.push(t);
        Self {
            kind,
            n_layers,
            n_heads,
            width,
            values,
            provenance,
        }
    }
}

/// The last query row of every (layer, head): `out[l, h, j] = A(l, h)[T-1, j]`.
pub fn last_token_slice(a: &AttentionTensor) -> SimplifiedAttention {
    let t = a.seq_len;
    let mut values = Vec::with_capacity(a.n_layers * a.n_heads * t);
    for l in 0..a.n_layers {
        for h in 0..a.n_heads {
            values.extend_from_slice(a.row(l, h, t - 1));
        }
    }
    SimplifiedAttention {
        kind: TraceKind::LastToken,
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        width: t,
        values,
        provenance: Provenance {
            example_id: None,
            transforms: vec![Transform::LastToken],
        },
    }
}

/// Average over heads, or over the `kept` (layer, head) pairs only.
pub fn pool_heads(
    s: &SimplifiedAttention,
    kept: Option<&BTreeSet<(usize, usize)>>,
) -> Result<SimplifiedAttention> {
    let kind = match s.kind {
        TraceKind::LastToken => TraceKind::HeadPooled,
        TraceKind::CrossHypernode => TraceKind::CrossPooled,
        TraceKind::RankPermuted => TraceKind::RankPermuted,
        k => bail!(Input, "cannot pool heads of a {k:?} trace"),
    };
    if let Some(kept) = kept {
        if kept.is_empty() {
            bail!(Input, "empty head subset");
        }
    }
    let mut values = vec![0.0f32; s.n_layers * s.width];
    for l in 0..s.n_layers {
        let heads: Vec<usize> = (0..s.n_heads)
            .filter(|&h| kept.is_none_or(|k| k.contains(&(l, h))))
            .collect();
        if heads.is_empty() {
            bail!(Input, "head subset keeps no head in layer {l}");
        }
        let out = &mut values[l * s.width..(l + 1) * s.width];
        for &h in &heads {
            for (o, &v) in out.iter_mut().zip(s.slice(l, h)) {
                *o += v;
            }
        }
        let inv = 1.0 / heads.len() as f32;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(s.derived(
        kind,
        s.n_layers,
        1,
        s.width,
        values,
        Transform::PoolHeads {
            kept: kept.map(|k| k.iter().copied().collect()),
        },
    ))
}

/// Positions ordered by ascending token value over the first `n_content`
/// positions, followed by the remaining (special) positions in order.
pub fn ranking_by_value(tokens: &[u32], n_content: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_content).collect();
    order.sort_by_key(|&i| (tokens[i], i));
    order.extend(n_content..tokens.len());
    order
}

fn check_permutation(ranking: &[usize], width: usize) -> Result<()> {
    if ranking.len() != width {
        bail!(
            Input,
            "ranking has {} entries for width {width}",
            ranking.len()
        );
    }
    let mut seen = vec![false; width];
    for &p in ranking {
        if p >= width || core::mem::replace(&mut seen[p], true) {
            bail!(Input, "ranking is not a bijection on 0..{width}");
        }
    }
    Ok(())
}

/// Reorder columns so that column `r` holds the position `ranking[r]`.
pub fn rank_permute(s: &SimplifiedAttention, ranking: &[usize]) -> Result<SimplifiedAttention> {
    if !matches!(s.kind, TraceKind::HeadPooled | TraceKind::LastToken) {
        bail!(
            Input,
            "rank permutation applies to last-token traces, got {:?}",
            s.kind
        );
    }
    check_permutation(ranking, s.width)?;
    let mut values = Vec::with_capacity(s.values.len());
    for chunk in s.values.chunks_exact(s.width) {
        values.extend(ranking.iter().map(|&p| chunk[p]));
    }
    Ok(s.derived(
        TraceKind::RankPermuted,
        s.n_layers,
        s.n_heads,
        s.width,
        values,
        Transform::RankPermute,
    ))
}

/// Undo [`rank_permute`] with the same ranking.
pub fn inverse_rank_permute(
    s: &SimplifiedAttention,
    ranking: &[usize],
    restore: TraceKind,
) -> Result<SimplifiedAttention> {
    if s.kind != TraceKind::RankPermuted {
        bail!(Input, "not a rank-permuted trace");
    }
    check_permutation(ranking, s.width)?;
    let mut values = vec![0.0f32; s.values.len()];
    for (src, dst) in s
        .values
        .chunks_exact(s.width)
        .zip(values.chunks_exact_mut(s.width))
    {
        for (r, &p) in ranking.iter().enumerate() {
            dst[p] = src[r];
        }
    }
    let mut out = s.clone();
    out.kind = restore;
    out.values = values;
    out.provenance.transforms.pop();
    Ok(out)
}

/// Collapse multi-token statements into one slot each.
///
/// `out[l, h, i] = max over question tokens q of mean over tokens s of
/// statement i of A(l, h)[q, s]`; rows are question tokens and columns are
/// statement tokens, which is the orientation that is not masked out when
/// the question follows the statements. Slot `|S|` applies the same rule to
/// the question's own tokens.
pub fn cross_pool(
    a: &AttentionTensor,
    statement_spans: &[(u32, u32)],
    question_span: (u32, u32),
) -> Result<SimplifiedAttention> {
    let t = a.seq_len as u32;
    let (q0, q1) = question_span;
    if q0 >= q1 || q1 > t {
        bail!(
            Input,
            "question span ({q0}, {q1}) is empty or exceeds {t} tokens"
        );
    }
    let mut spans: Vec<(u32, u32)> = statement_spans.to_vec();
    spans.push(question_span);
    let mut sorted = spans.clone();
    sorted.sort_unstable();
    for &(s, e) in &sorted {
        if s >= e || e > t {
            bail!(Data, "span ({s}, {e}) invalid for {t} tokens");
        }
    }
    if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
        bail!(Data, "statement and question spans overlap");
    }
    let width = spans.len();
    let mut values = Vec::with_capacity(a.n_layers * a.n_heads * width);
    for l in 0..a.n_layers {
        for h in 0..a.n_heads {
            for &(s, e) in &spans {
                let inv = 1.0 / (e - s) as f32;
                let mut best = f32::NEG_INFINITY;
                for q in q0..q1 {
                    let row = a.row(l, h, q as usize);
                    let mean = row[s as usize..e as usize].iter().sum::<f32>() * inv;
                    if mean > best {
                        best = mean;
                    }
                }
                values.push(best);
            }
        }
    }
    Ok(SimplifiedAttention {
        kind: TraceKind::CrossHypernode,
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        width,
        values,
        provenance: Provenance {
            example_id: None,
            transforms: vec![Transform::CrossPool],
        },
    })
}

/// Keep the first `layers` layers.
pub fn prefix(s: &SimplifiedAttention, layers: usize) -> Result<SimplifiedAttention> {
    if layers == 0 || layers > s.n_layers {
        bail!(Input, "prefix length {layers} outside 1..={}", s.n_layers);
    }
    let values = s.values[..layers * s.n_heads * s.width].to_vec();
    Ok(s.derived(
        s.kind,
        layers,
        s.n_heads,
        s.width,
        values,
        Transform::Prefix(layers),
    ))
}

/// Elementwise mean of equally shaped traces.
pub fn expected_trace(traces: &[SimplifiedAttention]) -> Result<SimplifiedAttention> {
    let Some(first) = traces.first() else {
        bail!(Input, "no traces to average");
    };
    if let Some(bad) = traces.iter().position(|t| !t.same_shape(first)) {
        bail!(
            Input,
            "trace {bad} differs in kind or dimensions from trace 0"
        );
    }
    let mut acc = vec![0.0f64; first.values.len()];
    for t in traces {
        for (a, &v) in acc.iter_mut().zip(&t.values) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / traces.len() as f64;
    let values = acc.into_iter().map(|v| (v * inv) as f32).collect();
    let mut out = first.derived(
        first.kind,
        first.n_layers,
        first.n_heads,
        first.width,
        values,
        Transform::Mean(traces.len()),
    );
    out.provenance.example_id = None;
    Ok(out)
}

/// Reduce the attention of one forward pass over `ex` to a trace of `kind`.
///
/// Examples without a question span use their last token as the question.
/// Rank permutation orders the statement positions by token value and keeps
/// the remaining positions in place after them.
pub fn simplify(
    a: &AttentionTensor,
    ex: &Example,
    kind: TraceKind,
    kept: Option<&BTreeSet<(usize, usize)>>,
) -> Result<SimplifiedAttention> {
    let t = a.seq_len() as u32;
    let out = match kind {
        TraceKind::LastToken => last_token_slice(a),
        TraceKind::HeadPooled => pool_heads(&last_token_slice(a), kept)?,
        TraceKind::RankPermuted => {
            let ranking = ranking_by_value(&ex.tokens, ex.n_statements());
            rank_permute(&pool_heads(&last_token_slice(a), kept)?, &ranking)?
        }
        TraceKind::CrossHypernode | TraceKind::CrossPooled => {
            let q = ex.question_span.unwrap_or((t - 1, t));
            let cross = cross_pool(a, &ex.statement_spans, q)?;
            if kind == TraceKind::CrossPooled {
                pool_heads(&cross, kept)?
            } else {
                cross
            }
        }
    };
    Ok(out.with_example(ex.id))
}

/// Traces of `model` on every example of `ds`, in dataset order.
pub fn collect_traces<F: Real>(
    model: &Model<F>,
    ds: &Dataset,
    kind: TraceKind,
    kept: Option<&BTreeSet<(usize, usize)>>,
    mask: &PruneMask,
) -> Result<Vec<SimplifiedAttention>> {
    ds.iter()
        .map(|ex| {
            let rec = model.forward(&ex.tokens, mask)?;
            simplify(&rec.attention, ex, kind, kept)
        })
        .collect()
}
