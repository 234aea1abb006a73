// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-norm decoder-only transformer.
//!
//! The model records post-softmax attention for every layer and head, can
//! disable heads or whole attention sublayers at inference ([`PruneMask`]),
//! and trains with AdamW on the cross-entropy of the answer token only.
//! Backpropagation is written out by hand; parameters live in one flat
//! buffer described by a [`ParamLayout`].

mod layout;
mod model;
mod train;

use alloc::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use layout::{LayerOffsets, ParamLayout, TensorSpec};
pub use model::{ForwardRecord, Model, Real, Workspace};
pub use train::{
    accuracy_of, chunk_gradient, count_correct_serial, evaluate_accuracy, train, BatchGradient,
    EpochLog, GradientEngine, LrSchedule, Serial, TrainHyper, TrainingLog, GRADIENT_CHUNK,
};

/// Shape of the transformer. The MLP width is fixed at `4 * d_model`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            bail!(Config, "n_layers, n_heads and d_model must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            bail!(
                Config,
                "d_model {} is not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            );
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            bail!(Config, "vocab_size and max_seq_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn n_units(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// Attention units switched off at inference.
///
/// A disabled head contributes a zero value output. A disabled layer skips
/// its attention sublayer entirely (output projection bias included), so the
/// residual stream passes straight to the MLP.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub disabled_heads: BTreeSet<(usize, usize)>,
    pub disabled_layers: BTreeSet<usize>,
}

impl PruneMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn heads<I: IntoIterator<Item = (usize, usize)>>(heads: I) -> Self {
        Self {
            disabled_heads: heads.into_iter().collect(),
            disabled_layers: BTreeSet::new(),
        }
    }

    pub fn layers<I: IntoIterator<Item = usize>>(layers: I) -> Self {
        Self {
            disabled_heads: BTreeSet::new(),
            disabled_layers: layers.into_iter().collect(),
        }
    }

    pub fn layer_enabled(&self, layer: usize) -> bool {
        !self.disabled_layers.contains(&layer)
    }

    pub fn head_enabled(&self, layer: usize, head: usize) -> bool {
        self.layer_enabled(layer) && !self.disabled_heads.contains(&(layer, head))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(&(l, h)) = self
            .disabled_heads
            .iter()
            .find(|&&(l, h)| l >= cfg.n_layers || h >= cfg.n_heads)
        {
            bail!(
                Input,
                "pruned head ({l}, {h}) outside {}x{} grid",
                cfg.n_layers,
                cfg.n_heads
            );
        }
        if let Some(&l) = self.disabled_layers.iter().find(|&&l| l >= cfg.n_layers) {
            bail!(Input, "pruned layer {l} outside 0..{}", cfg.n_layers);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 10,
            max_seq_len: 6,
            seed: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.d_model = 9;
        assert!(c.validate().is_err());
        c = cfg();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let gpt2_small = ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            vocab_size: 50257,
            max_seq_len: 1024,
            seed: 0,
        };
        assert!(gpt2_small.validate().is_ok());
    }

    #[test]
    fn layer_mask_implies_heads() {
        let m = PruneMask::layers([1]);
        assert!(!m.head_enabled(1, 0));
        assert!(m.head_enabled(0, 1));
        assert!(PruneMask::heads([(2, 0)]).validate(&cfg()).is_err());
        assert!(PruneMask::layers([2]).validate(&cfg()).is_err());
    }
}
