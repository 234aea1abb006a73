// SPDX-License-Identifier: MIT OR Apache-2.0

//! The JSON run configuration. Every section has defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use mechprobe_core::probe::ProbeConfig;
use mechprobe_core::taskgen::TaskConfig;
use mechprobe_core::toylm::{LrSchedule, ModelConfig, TrainHyper};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub seed: u64,
    /// Seed of the random-init baseline; `seed + 1` when absent.
    pub random_seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            seed: 42,
            random_seed: None,
        }
    }
}

/// Sizes of the splits generated next to the training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dev: u64,
    pub test: u64,
    /// Examples whose traces train the probe.
    pub probe_train: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dev: 1000,
            test: 1000,
            probe_train: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub prune_rates: Vec<f64>,
    pub random_prune_seeds: Vec<u64>,
    pub layer_budget: f64,
    pub n_bins: usize,
    pub n_resamples: usize,
    pub subset_lo: usize,
    pub subset_hi: usize,
    pub seed: u64,
    /// Test examples whose attention is rolled out by `flow-check`.
    pub flow_examples: usize,
    pub layerwise: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            prune_rates: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            random_prune_seeds: vec![1, 2, 3],
            layer_budget: 0.05,
            n_bins: 8,
            n_resamples: 2048,
            subset_lo: 64,
            subset_hi: 128,
            seed: 7,
            flow_examples: 200,
            layerwise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub work_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The training split; the other splits reuse it with their own sizes.
    pub task: TaskConfig,
    pub model: ModelSection,
    pub train: TrainHyper,
    pub data: DataSection,
    pub probe: ProbeConfig,
    pub analysis: AnalysisSection,
    pub paths: PathsSection,
}

/// The frozen desk-scale training recipe.
pub fn desk_train_hyper(seed: u64) -> TrainHyper {
    TrainHyper {
        epochs: 5,
        batch_size: 64,
        learning_rate: 3e-3,
        weight_decay: 1e-3,
        seed,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        warmup_steps: 200,
        schedule: LrSchedule::Cosine,
        grad_clip: Some(1.0),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::kth(8, 2, 64, 10_000, 42),
            model: ModelSection::default(),
            train: desk_train_hyper(42),
            data: DataSection::default(),
            probe: ProbeConfig::default(),
            analysis: AnalysisSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match Error::io(path, e) {
            Error::Missing { path } => {
                Error::Config(format!("{}: no such config file", path.display()))
            }
            other => other,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}: {e}", e.line())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |field: &str, e: mechprobe_core::Error| Error::Config(format!("{field}: {e}"));
        self.task.validate().map_err(|e| wrap("task", e))?;
        self.model_config()
            .validate()
            .map_err(|e| wrap("model", e))?;
        self.train.validate().map_err(|e| wrap("train", e))?;
        if self.probe.k_neighbors == 0 {
            return Err(Error::Config("probe.k_neighbors must be positive".into()));
        }
        let a = &self.analysis;
        if a.prune_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config(
                "analysis.prune_rates must lie in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&a.layer_budget) {
            return Err(Error::Config(
                "analysis.layer_budget must lie in [0, 1)".into(),
            ));
        }
        if a.n_bins == 0 || a.subset_lo == 0 || a.subset_lo > a.subset_hi {
            return Err(Error::Config(
                "analysis needs n_bins >= 1 and 1 <= subset_lo <= subset_hi".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_model: self.model.d_model,
            vocab_size: self.task.vocab().model_vocab_size() as usize,
            max_seq_len: self.task.seq_len(),
            seed: self.model.seed,
        }
    }

    pub fn random_model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self
                .model
                .random_seed
                .unwrap_or(self.model.seed.wrapping_add(1)),
            ..self.model_config()
        }
    }

    pub fn work_dir(&self) -> &Path {
        &self.paths.work_dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"analysis": {"n_binz": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"analysis": {"n_bins": 4}, "model": {"d_model": 32}}"#)
            .unwrap();
        assert_eq!(cfg.analysis.n_bins, 4);
        assert_eq!(cfg.analysis.subset_hi, 128);
        assert_eq!(cfg.model_config().d_model, 32);
        assert_eq!(cfg.model_config().vocab_size, 72);
    }

    #[test]
    fn random_seed_defaults_to_next_seed() {
        assert_eq!(RunConfig::default().random_model_config().seed, 43);
    }
}
