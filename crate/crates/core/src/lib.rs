// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mechanistic probing of attention in small causal transformers.
//!
//! The crate trains a decoder-only transformer on synthetic multi-step
//! reasoning tasks and recovers the gold reasoning tree of each input from
//! the model's attention weights:
//!
//! - [`taskgen`]: synthetic datasets (k-th smallest element, fact/rule chains)
//!   annotated with reasoning trees.
//! - [`toylm`]: the transformer, with attention recording, pruning masks and
//!   an AdamW training loop.
//! - [`trace`]: attention tensors and their simplifications (last-token
//!   slice, head pooling, rank permutation, cross-statement pooling).
//! - [`probe`]: kNN probes, F1-macro and baseline-normalized probing scores.
//! - [`heads`]: size/position entropy of heads and entropy-ordered pruning.
//! - [`flow`]: attention rollout and the first-token domination bound.
//! - [`analysis`]: correlation, robustness and greedy layer pruning studies.
//! - [`repro`]: recomputation of normalized scores from published raw F1.
//!
//! Everything here is pure computation over `alloc`; file formats, the
//! command line and thread pools live in the `mechprobe` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod error;
pub mod flow;
pub mod heads;
pub mod probe;
pub mod repro;
pub mod rng;
pub mod taskgen;
pub mod toylm;
pub mod trace;

pub use error::{Error, Result};
