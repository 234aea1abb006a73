// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention rollout and the first-token domination bound.
//!
//! Treating every layer's head-pooled attention as a flow, the share of token
//! `i`'s representation at layer `l` that comes from the first token is
//! `accum(l)[i, 0]` with `accum(1) = A(1)` and `accum(l + 1) = A(l + 1) accum(l)`.
//! If every causally allowed entry is at least `eps`, that share is at least
//! `1 - (1 - eps)^l`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::trace::AttentionTensor;

/// Row tolerance used when checking that layer matrices are stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Slack allowed when checking the bound, to absorb rounding.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub seq_len: usize,
    /// `accum[l]` is the `T x T` row-major rollout after `l + 1` layers.
    pub accum: Vec<Vec<f64>>,
    /// Smallest causally allowed entry over all layer matrices.
    pub epsilon: f64,
}

impl FlowState {
    pub fn n_layers(&self) -> usize {
        self.accum.len()
    }
}

fn check_layer(m: &[f64], t: usize, layer: usize) -> Result<()> {
    if m.len() != t * t {
        bail!(
            Data,
            "layer {layer} matrix has {} entries, expected {}",
            m.len(),
            t * t
        );
    }
    for i in 0..t {
        let row = &m[i * t..(i + 1) * t];
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            bail!(
                Data,
                "layer {layer} row {i} has negative or non-finite entries"
            );
        }
        if row[i + 1..].iter().any(|&v| v != 0.0) {
            bail!(Data, "layer {layer} row {i} attends to a later token");
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            bail!(Data, "layer {layer} row {i} sums to {s}");
        }
    }
    Ok(())
}

/// Roll out a stack of causal row-stochastic `T x T` matrices (row-major).
pub fn rollout(layers: &[Vec<f64>], seq_len: usize) -> Result<FlowState> {
    if layers.is_empty() || seq_len == 0 {
        bail!(Input, "rollout needs at least one layer and one token");
    }
    let t = seq_len;
    let mut epsilon = f64::INFINITY;
    for (l, m) in layers.iter().enumerate() {
        check_layer(m, t, l)?;
        for i in 0..t {
            for j in 0..=i {
                epsilon = epsilon.min(m[i * t + j]);
            }
        }
    }
    let mut accum: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    accum.push(layers[0].clone());
    for m in &layers[1..] {
        let prev = accum.last().expect("non-empty");
        let mut next = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..=i {
                let a = m[i * t + j];
                if a == 0.0 {
                    continue;
                }
                for c in 0..=j {
                    next[i * t + c] += a * prev[j * t + c];
                }
            }
        }
        accum.push(next);
    }
    Ok(FlowState {
        seq_len: t,
        accum,
        epsilon,
    })
}

/// Rollout of the head-pooled attention of one forward pass.
pub fn rollout_attention(a: &AttentionTensor) -> Result<FlowState> {
    let layers: Vec<Vec<f64>> = (0..a.n_layers()).map(|l| a.pooled_layer(l)).collect();
    rollout(&layers, a.seq_len())
}

/// `ir[l][i]`: share of token `i` at layer `l + 1` attributed to the first token.
pub fn information_ratio_first(state: &FlowState) -> Vec<Vec<f64>> {
    let t = state.seq_len;
    state
        .accum
        .iter()
        .map(|m| (0..t).map(|i| m[i * t]).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub holds: bool,
    /// `min over (i, l) of IR - (1 - (1 - eps)^l)`.
    pub margin: f64,
    pub epsilon: f64,
    /// (layer, token) where the margin is attained, layers counted from 1.
    pub tightest: (usize, usize),
}

pub fn check_domination_bound(state: &FlowState) -> BoundReport {
    let ir = information_ratio_first(state);
    let mut margin = f64::INFINITY;
    let mut tightest = (1, 0);
    for (l, row) in ir.iter().enumerate() {
        let bound = 1.0 - libm::pow(1.0 - state.epsilon, (l + 1) as f64);
        for (i, &v) in row.iter().enumerate() {
            if v - bound < margin {
                margin = v - bound;
                tightest = (l + 1, i);
            }
        }
    }
    BoundReport {
        holds: margin >= -BOUND_TOL,
        margin,
        epsilon: state.epsilon,
        tightest,
    }
}

/// One entry of `flow_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowExampleReport {
    pub example_id: u64,
    pub epsilon: f64,
    pub margin: f64,
    pub holds: bool,
}
