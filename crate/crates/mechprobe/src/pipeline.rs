// SPDX-License-Identifier: MIT OR Apache-2.0

//! The experiment pipeline shared by the command line and the test suites.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mechprobe_core::probe::{
    per_height_probe, run_probe, DataSplits, ProbeConfig, ProbeReport, TraceSplits,
};
use mechprobe_core::taskgen::{generate, Dataset, Example, TaskConfig};
use mechprobe_core::toylm::{
    count_correct_serial, train, BatchGradient, EpochLog, GradientEngine, Model, PruneMask, Serial,
    TrainingLog, Workspace,
};
use mechprobe_core::trace::{simplify, SimplifiedAttention, TraceKind};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};

const EVAL_CHUNK: usize = 64;

/// Worker pool for evaluation and trace collection.
///
/// Training always runs on the calling thread. Parallel work only splits
/// integer counts and per-example outputs, so results do not depend on the
/// thread count.
pub struct Pool {
    pool: Option<rayon::ThreadPool>,
}

impl Pool {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        if threads == 1 {
            return Ok(Self { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    pub fn serial() -> Self {
        Self { pool: None }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// Traces of `model` on every example, in dataset order.
    pub fn collect_traces(
        &self,
        model: &Model<f32>,
        ds: &Dataset,
        kind: TraceKind,
        kept: Option<&BTreeSet<(usize, usize)>>,
        mask: &PruneMask,
    ) -> mechprobe_core::Result<Vec<SimplifiedAttention>> {
        let one = |ex: &Example| {
            let rec = model.forward(&ex.tokens, mask)?;
            simplify(&rec.attention, ex, kind, kept)
        };
        match &self.pool {
            None => ds.iter().map(one).collect(),
            Some(p) => p.install(|| ds.examples.par_iter().map(one).collect()),
        }
    }
}

impl GradientEngine for Pool {
    fn batch_gradient(
        &self,
        model: &Model<f32>,
        batch: &[&Example],
    ) -> mechprobe_core::Result<BatchGradient> {
        Serial.batch_gradient(model, batch)
    }

    fn count_correct(
        &self,
        model: &Model<f32>,
        examples: &[Example],
        mask: &PruneMask,
    ) -> mechprobe_core::Result<usize> {
        match &self.pool {
            None => Serial.count_correct(model, examples, mask),
            Some(p) => p.install(|| {
                examples
                    .par_chunks(EVAL_CHUNK)
                    .map(|c| count_correct_serial(model, c, mask, &mut Workspace::new()))
                    .try_reduce(|| 0, |a, b| Ok(a + b))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
    ProbeTrain,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::Test, Split::ProbeTrain];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::ProbeTrain => "probe_train",
        }
    }

    /// Seed coordinate that keeps the splits' example streams apart.
    pub fn seed(self) -> u64 {
        self as u64
    }

    pub fn size(self, cfg: &RunConfig) -> u64 {
        match self {
            Split::Train => cfg.task.n_examples,
            Split::Dev => cfg.data.dev,
            Split::Test => cfg.data.test,
            Split::ProbeTrain => cfg.data.probe_train,
        }
    }

    pub fn task(self, cfg: &RunConfig) -> TaskConfig {
        TaskConfig {
            n_examples: self.size(cfg),
            ..cfg.task.clone()
        }
    }
}

pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    Ok(generate(&split.task(cfg), split.seed())?)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub probe_train: Dataset,
}

pub fn generate_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits {
        train: generate_split(cfg, Split::Train)?,
        dev: generate_split(cfg, Split::Dev)?,
        test: generate_split(cfg, Split::Test)?,
        probe_train: generate_split(cfg, Split::ProbeTrain)?,
    })
}

pub fn train_model(
    cfg: &RunConfig,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    engine: &Pool,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model<f32>, TrainingLog)> {
    let mut model = Model::init_random(cfg.model_config())?;
    let log = train(&mut model, train_ds, dev_ds, &cfg.train, engine, on_epoch)?;
    Ok((model, log))
}

pub fn random_model(cfg: &RunConfig) -> Result<Model<f32>> {
    Ok(Model::init_random(cfg.random_model_config())?)
}

pub fn single_token_statements(ds: &Dataset) -> bool {
    ds.iter()
        .all(|ex| ex.statement_spans.iter().all(|&(a, b)| b == a + 1))
}

pub fn probe_kind(cfg: &ProbeConfig, ds: &Dataset) -> TraceKind {
    cfg.trace_kind(single_token_statements(ds))
}

/// Train- and test-split traces of the trained and random-init models.
#[derive(Debug, Clone)]
pub struct ProbeTraces {
    pub model_train: Vec<SimplifiedAttention>,
    pub model_test: Vec<SimplifiedAttention>,
    pub rand_train: Vec<SimplifiedAttention>,
    pub rand_test: Vec<SimplifiedAttention>,
}

impl ProbeTraces {
    pub fn model(&self) -> TraceSplits<'_> {
        TraceSplits {
            train: &self.model_train,
            test: &self.model_test,
        }
    }

    pub fn rand(&self) -> TraceSplits<'_> {
        TraceSplits {
            train: &self.rand_train,
            test: &self.rand_test,
        }
    }
}

pub fn head_subset(cfg: &ProbeConfig) -> Option<BTreeSet<(usize, usize)>> {
    cfg.head_subset
        .as_ref()
        .map(|v| v.iter().copied().collect())
}

pub fn collect_probe_traces(
    pool: &Pool,
    cfg: &ProbeConfig,
    model: &Model<f32>,
    rand: &Model<f32>,
    probe_train: &Dataset,
    test: &Dataset,
) -> Result<ProbeTraces> {
    let kind = probe_kind(cfg, test);
    let kept = head_subset(cfg);
    let mask = PruneMask::none();
    let get = |m: &Model<f32>, ds: &Dataset| pool.collect_traces(m, ds, kind, kept.as_ref(), &mask);
    Ok(ProbeTraces {
        model_train: get(model, probe_train)?,
        model_test: get(model, test)?,
        rand_train: get(rand, probe_train)?,
        rand_test: get(rand, test)?,
    })
}

/// Both probes, optionally layer-wise, plus one-vs-rest height curves when several heights occur.
pub fn full_probe_report(
    traces: &ProbeTraces,
    probe_train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    layerwise: bool,
) -> Result<ProbeReport> {
    let ds = DataSplits {
        train: probe_train,
        test,
    };
    let mut report = run_probe(traces.model(), traces.rand(), ds, cfg, layerwise)?;
    let heights: BTreeSet<u32> = probe_train
        .iter()
        .flat_map(|ex| ex.tree.heights.iter().copied())
        .collect();
    if layerwise && heights.len() > 1 {
        let heights: Vec<u32> = heights.into_iter().collect();
        report.per_height_f1 = per_height_probe(traces.model(), ds, &heights, cfg)?;
    }
    Ok(report)
}

/// A JSON artifact with the run configuration echoed next to its payload.
#[derive(Debug, Serialize)]
pub struct Stamped<'a, T: Serialize> {
    pub config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    pub result: T,
}

impl<'a, T: Serialize> Stamped<'a, T> {
    pub fn new(config: &'a RunConfig, deterministic: bool, result: T) -> Self {
        let created_unix = (!deterministic).then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        });
        Self {
            config,
            created_unix,
            result,
        }
    }
}

/// File names inside the work directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn dataset(&self, split: Split) -> PathBuf {
        self.dir.join(format!("{}.jsonl", split.name()))
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn random_model(&self) -> PathBuf {
        self.dir.join("random.ckpt")
    }
    pub fn training_log(&self) -> PathBuf {
        self.dir.join("training_log.json")
    }
    /// `who` is `model` or `random`; `split` is `train` or `test`.
    pub fn traces(&self, who: &str, split: &str) -> PathBuf {
        self.dir.join(format!("traces_{who}_{split}.mpt"))
    }
    pub fn probe_report(&self) -> PathBuf {
        self.dir.join("probe_report.json")
    }
    pub fn head_entropy(&self) -> PathBuf {
        self.dir.join("head_entropy.csv")
    }
    pub fn pruning_curve(&self) -> PathBuf {
        self.dir.join("pruning_curve.csv")
    }
    pub fn layer_prune_log(&self) -> PathBuf {
        self.dir.join("layer_prune_log.json")
    }
    pub fn flow_report(&self) -> PathBuf {
        self.dir.join("flow_report.json")
    }
    pub fn correlation(&self) -> PathBuf {
        self.dir.join("correlation.csv")
    }
    pub fn correlation_summary(&self) -> PathBuf {
        self.dir.join("correlation.json")
    }
    pub fn robustness(&self) -> PathBuf {
        self.dir.join("robustness.csv")
    }
    pub fn robustness_summary(&self) -> PathBuf {
        self.dir.join("robustness.json")
    }
    pub fn heatmap(&self) -> PathBuf {
        self.dir.join("heatmap.csv")
    }
    /// Config echo written next to a CSV artifact.
    pub fn echo_for(csv: &Path) -> PathBuf {
        csv.with_extension("config.json")
    }
}
