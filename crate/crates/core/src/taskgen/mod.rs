// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic reasoning datasets annotated with gold reasoning trees.
//!
//! Two task families share one token layout ([`Vocab`]):
//!
//! - **k-th smallest**: `m` distinct numbers followed by a query marker; the
//!   answer is the k-th smallest number. Each number is a statement.
//! - **chain proof**: 4-token facts `(entity HAS attribute ±)` and rules
//!   `(attribute IMPLIES attribute ±)`, then a 3-token question
//!   `(entity ASK attribute)`; the answer is `TRUE` or `FALSE`.

mod chain;
mod kth;
mod split;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use chain::{corrupt_useless, decode_statements, entails, gen_chain_proof, Literal, Statement};
pub use kth::{annotate_tree_kth, gen_kth_smallest};
pub use split::split;

/// Number of special tokens appended after the content symbols.
pub const N_SPECIAL: u32 = 8;

/// Token layout: content symbols `0..content` followed by [`N_SPECIAL`] specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub content: u32,
}

impl Vocab {
    pub const fn new(content: u32) -> Self {
        Self { content }
    }
    pub const fn qry(&self) -> u32 {
        self.content
    }
    pub const fn has(&self) -> u32 {
        self.content + 1
    }
    pub const fn implies(&self) -> u32 {
        self.content + 2
    }
    pub const fn ask(&self) -> u32 {
        self.content + 3
    }
    pub const fn pos(&self) -> u32 {
        self.content + 4
    }
    pub const fn neg(&self) -> u32 {
        self.content + 5
    }
    pub const fn yes(&self) -> u32 {
        self.content + 6
    }
    pub const fn no(&self) -> u32 {
        self.content + 7
    }
    /// Size of the model's embedding table.
    pub const fn model_vocab_size(&self) -> u32 {
        self.content + N_SPECIAL
    }
    pub const fn is_special(&self, tok: u32) -> bool {
        tok >= self.content
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "kth")]
    KthSmallest,
    #[serde(rename = "chain")]
    ChainProof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "true")]
    True,
    #[serde(rename = "false")]
    False,
}

/// Gold reasoning tree: the useful statements `V` and their heights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTree {
    pub node_indices: Vec<u32>,
    pub heights: Vec<u32>,
}

impl ReasoningTree {
    /// Validate the tree shape and build it.
    ///
    /// Heights must form a contiguous range from 0 with exactly one node at
    /// every height above 0.
    pub fn new(node_indices: Vec<u32>, heights: Vec<u32>) -> Result<Self> {
        if node_indices.len() != heights.len() {
            bail!(
                Data,
                "tree has {} nodes but {} heights",
                node_indices.len(),
                heights.len()
            );
        }
        if node_indices.is_empty() {
            bail!(Data, "tree has no nodes");
        }
        let mut seen = node_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            bail!(Data, "tree repeats a node index");
        }
        let depth = heights.iter().copied().max().unwrap_or(0);
        for h in 0..=depth {
            let n = heights.iter().filter(|&&x| x == h).count();
            if n == 0 {
                bail!(Data, "tree heights skip level {h}");
            }
            if h > 0 && n != 1 {
                bail!(
                    Data,
                    "tree has {n} nodes at height {h}; expected exactly one"
                );
            }
        }
        Ok(Self {
            node_indices,
            heights,
        })
    }

    pub fn depth(&self) -> u32 {
        self.heights.iter().copied().max().unwrap_or(0)
    }

    pub fn contains(&self, statement: u32) -> bool {
        self.node_indices.contains(&statement)
    }

    pub fn height_of(&self, statement: u32) -> Option<u32> {
        self.node_indices
            .iter()
            .position(|&n| n == statement)
            .map(|i| self.heights[i])
    }
}

/// One annotated input sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub task: TaskKind,
    pub tokens: Vec<u32>,
    /// Half-open token ranges, one per statement, in input order.
    pub statement_spans: Vec<(u32, u32)>,
    pub question_span: Option<(u32, u32)>,
    pub answer: u32,
    pub tree: ReasoningTree,
    pub k: Option<u32>,
    pub label: Option<Label>,
}

impl Example {
    pub fn n_statements(&self) -> usize {
        self.statement_spans.len()
    }

    /// Check the span, answer and tree invariants against a vocabulary.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let t = self.tokens.len() as u32;
        let mut spans: Vec<(u32, u32)> = self.statement_spans.clone();
        if let Some(q) = self.question_span {
            spans.push(q);
        }
        let mut covered = alloc::vec![false; self.tokens.len()];
        let mut prev_end = 0u32;
        for &(s, e) in &spans {
            if s >= e || e > t {
                bail!(
                    Data,
                    "example {}: span ({s}, {e}) invalid for {t} tokens",
                    self.id
                );
            }
            if s < prev_end {
                bail!(
                    Data,
                    "example {}: spans overlap or are out of order at ({s}, {e})",
                    self.id
                );
            }
            prev_end = e;
            for c in &mut covered[s as usize..e as usize] {
                *c = true;
            }
        }
        for (i, (&tok, &c)) in self.tokens.iter().zip(&covered).enumerate() {
            if tok >= vocab.model_vocab_size() {
                bail!(
                    Data,
                    "example {}: token {tok} at {i} outside vocabulary",
                    self.id
                );
            }
            if !c && !vocab.is_special(tok) {
                bail!(
                    Data,
                    "example {}: content token at {i} not covered by any span",
                    self.id
                );
            }
        }
        if self.answer >= vocab.model_vocab_size() {
            bail!(
                Data,
                "example {}: answer token {} outside vocabulary",
                self.id,
                self.answer
            );
        }
        let n = self.statement_spans.len() as u32;
        if let Some(&bad) = self.tree.node_indices.iter().find(|&&i| i >= n) {
            bail!(
                Data,
                "example {}: tree node {bad} but only {n} statements",
                self.id
            );
        }
        ReasoningTree::new(self.tree.node_indices.clone(), self.tree.heights.clone())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }
    pub fn len(&self) -> usize {
        self.examples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
    pub fn iter(&self) -> core::slice::Iter<'_, Example> {
        self.examples.iter()
    }
    pub fn max_seq_len(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(0)
    }
}

impl FromIterator<Example> for Dataset {
    fn from_iter<I: IntoIterator<Item = Example>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Generator settings for either task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    /// List length (k-th smallest).
    #[serde(default = "default_m")]
    pub m: u32,
    /// Target rank (k-th smallest).
    #[serde(default = "default_k")]
    pub k: u32,
    /// Number of content symbols: the number domain, or entities plus attributes.
    pub vocab_size: u32,
    /// Statements per example (chain proof).
    #[serde(default = "default_n_statements")]
    pub n_statements: u32,
    /// Gold tree depth for chain proofs, 0 or 1.
    #[serde(default = "default_depth")]
    pub chain_depth: u32,
    pub n_examples: u64,
    pub seed: u64,
}

fn default_m() -> u32 {
    8
}
fn default_k() -> u32 {
    2
}
fn default_n_statements() -> u32 {
    4
}
fn default_depth() -> u32 {
    1
}

/// Dataset sizes of the reference finetuning protocol (train, dev, test).
pub const REFERENCE_SPLIT_SIZES: (u64, u64, u64) = (980_000, 10_000, 10_000);

impl TaskConfig {
    pub fn kth(m: u32, k: u32, vocab_size: u32, n_examples: u64, seed: u64) -> Self {
        Self {
            task: TaskKind::KthSmallest,
            m,
            k,
            vocab_size,
            n_statements: default_n_statements(),
            chain_depth: default_depth(),
            n_examples,
            seed,
        }
    }

    pub fn chain(
        n_statements: u32,
        depth: u32,
        vocab_size: u32,
        n_examples: u64,
        seed: u64,
    ) -> Self {
        Self {
            task: TaskKind::ChainProof,
            m: default_m(),
            k: default_k(),
            vocab_size,
            n_statements,
            chain_depth: depth,
            n_examples,
            seed,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    /// Longest token sequence this configuration produces.
    pub fn seq_len(&self) -> usize {
        match self.task {
            TaskKind::KthSmallest => self.m as usize + 1,
            TaskKind::ChainProof => 4 * self.n_statements as usize + 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            TaskKind::KthSmallest => {
                if !(1 <= self.k && self.k <= self.m && self.m <= self.vocab_size) {
                    bail!(
                        Config,
                        "need 1 <= k <= m <= vocab_size, got k={}, m={}, vocab_size={}",
                        self.k,
                        self.m,
                        self.vocab_size
                    );
                }
            }
            TaskKind::ChainProof => {
                if self.n_statements < 2 {
                    bail!(
                        Config,
                        "n_statements must be at least 2, got {}",
                        self.n_statements
                    );
                }
                if self.chain_depth > 1 {
                    bail!(
                        Config,
                        "chain_depth must be 0 or 1, got {}",
                        self.chain_depth
                    );
                }
                let (entities, attributes) = chain::symbol_split(self.vocab_size);
                if entities < 1 || attributes < 3 {
                    bail!(
                        Config,
                        "vocab_size {} too small for chain proofs (need >= 1 entity and >= 3 attributes)",
                        self.vocab_size
                    );
                }
            }
        }
        Ok(())
    }
}

/// Generate the dataset described by `cfg`.
pub fn generate(cfg: &TaskConfig, split_seed: u64) -> Result<Dataset> {
    match cfg.task {
        TaskKind::KthSmallest => gen_kth_smallest(cfg, split_seed),
        TaskKind::ChainProof => gen_chain_proof(cfg, split_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tree_shape_rules() {
        assert!(ReasoningTree::new(vec![1, 0], vec![0, 1]).is_ok());
        assert!(ReasoningTree::new(vec![1, 0, 2], vec![0, 0, 1]).is_ok());
        assert!(ReasoningTree::new(vec![1, 0], vec![1, 1]).is_err());
        assert!(ReasoningTree::new(vec![1, 0], vec![0, 2]).is_err());
        assert!(ReasoningTree::new(vec![1, 1], vec![0, 1]).is_err());
        assert!(ReasoningTree::new(vec![], vec![]).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(TaskConfig::kth(3, 4, 10, 1, 0).validate().is_err());
        assert!(TaskConfig::kth(11, 2, 10, 1, 0).validate().is_err());
        assert!(TaskConfig::kth(3, 0, 10, 1, 0).validate().is_err());
        assert!(TaskConfig::kth(16, 2, 256, 1, 0).validate().is_ok());
        assert!(TaskConfig::chain(1, 1, 32, 1, 0).validate().is_err());
        assert!(TaskConfig::chain(4, 2, 32, 1, 0).validate().is_err());
        assert!(TaskConfig::chain(4, 1, 3, 1, 0).validate().is_err());
    }

    #[test]
    fn reference_protocol_sizes() {
        let (train, dev, test) = REFERENCE_SPLIT_SIZES;
        assert_eq!(train, 980_000);
        assert_eq!((dev, test), (10_000, 10_000));
    }
}
