// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, PruneMask, Workspace};
use crate::error::{bail, Error, Result};
use crate::rng;
use crate::taskgen::{Dataset, Example};

/// Examples per gradient partial sum.
///
/// A batch gradient is always the in-order sum of per-chunk sums, however
/// many threads compute the chunks, so results do not depend on the pool size.
pub const GRADIENT_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the peak rate to zero over all steps.
    Cosine,
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Clip the global gradient norm to this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl TrainHyper {
    /// The reference finetuning protocol: 2 epochs, batch 256, lr 1e-6, weight decay 1e-3.
    pub fn reference_protocol(seed: u64) -> Self {
        Self {
            epochs: 2,
            batch_size: 256,
            learning_rate: 1e-6,
            weight_decay: 1e-3,
            seed,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "epochs and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            bail!(
                Config,
                "learning_rate and weight_decay must be non-negative"
            );
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "beta1 and beta2 must lie in [0, 1)");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let done = step.saturating_sub(self.warmup_steps) as f64;
                0.5 * (1.0 + libm::cos(core::f64::consts::PI * (done / span).min(1.0)))
            }
        };
        self.learning_rate * warm * decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

/// Sum of per-example gradients and losses over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub grad: Vec<f32>,
    pub loss_sum: f64,
    pub n: usize,
}

impl BatchGradient {
    /// Add chunk partial sums in the order given.
    pub fn from_chunks<I: IntoIterator<Item = BatchGradient>>(size: usize, chunks: I) -> Self {
        let mut out = BatchGradient {
            grad: vec![0.0; size],
            loss_sum: 0.0,
            n: 0,
        };
        for c in chunks {
            for (a, b) in out.grad.iter_mut().zip(&c.grad) {
                *a += *b;
            }
            out.loss_sum += c.loss_sum;
            out.n += c.n;
        }
        out
    }
}

/// Computes batch gradients and correct-prediction counts, possibly in parallel.
pub trait GradientEngine {
    fn batch_gradient(&self, model: &Model<f32>, batch: &[&Example]) -> Result<BatchGradient>;
    fn count_correct(
        &self,
        model: &Model<f32>,
        examples: &[Example],
        mask: &PruneMask,
    ) -> Result<usize>;
}

/// Gradient of one chunk, examples summed in order.
pub fn chunk_gradient(
    model: &Model<f32>,
    chunk: &[&Example],
    ws: &mut Workspace<f32>,
) -> Result<BatchGradient> {
    let mask = PruneMask::none();
    let mut grad = vec![0.0f32; model.layout().total];
    let mut loss_sum = 0.0f64;
    for ex in chunk {
        loss_sum += model.loss_and_grad(&ex.tokens, ex.answer, &mask, ws, &mut grad)? as f64;
    }
    Ok(BatchGradient {
        grad,
        loss_sum,
        n: chunk.len(),
    })
}

/// Number of examples whose argmax prediction equals the answer token.
pub fn count_correct_serial(
    model: &Model<f32>,
    examples: &[Example],
    mask: &PruneMask,
    ws: &mut Workspace<f32>,
) -> Result<usize> {
    let mut n = 0;
    for ex in examples {
        if model.predict(&ex.tokens, mask, ws)? == ex.answer {
            n += 1;
        }
    }
    Ok(n)
}

/// Single-threaded engine.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl GradientEngine for Serial {
    fn batch_gradient(&self, model: &Model<f32>, batch: &[&Example]) -> Result<BatchGradient> {
        let mut ws = Workspace::new();
        let parts = batch
            .chunks(GRADIENT_CHUNK)
            .map(|c| chunk_gradient(model, c, &mut ws))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchGradient::from_chunks(model.layout().total, parts))
    }

    fn count_correct(
        &self,
        model: &Model<f32>,
        examples: &[Example],
        mask: &PruneMask,
    ) -> Result<usize> {
        count_correct_serial(model, examples, mask, &mut Workspace::new())
    }
}

/// Fraction of `ds` predicted exactly.
pub fn evaluate_accuracy(model: &Model<f32>, ds: &Dataset, mask: &PruneMask) -> Result<f64> {
    accuracy_of(&Serial, model, ds, mask)
}

pub fn accuracy_of<E: GradientEngine + ?Sized>(
    engine: &E,
    model: &Model<f32>,
    ds: &Dataset,
    mask: &PruneMask,
) -> Result<f64> {
    if ds.is_empty() {
        bail!(Input, "cannot evaluate accuracy on an empty dataset");
    }
    Ok(engine.count_correct(model, &ds.examples, mask)? as f64 / ds.len() as f64)
}

/// Train `model` in place with AdamW on the answer-token cross-entropy.
///
/// Batch order is a seeded shuffle per epoch. `on_epoch` sees each epoch's
/// log entry as soon as it is computed.
pub fn train<E: GradientEngine + ?Sized>(
    model: &mut Model<f32>,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    hp: &TrainHyper,
    engine: &E,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingLog> {
    hp.validate()?;
    if train_ds.is_empty() {
        bail!(Input, "training set is empty");
    }
    let n_params = model.layout().total;
    let decay: Vec<bool> = {
        let mut d = vec![false; n_params];
        for t in &model.layout().tensors {
            d[t.range()].fill(t.decay);
        }
        d
    };
    let mut m = vec![0.0f32; n_params];
    let mut v = vec![0.0f32; n_params];
    let steps_per_epoch = train_ds.len().div_ceil(hp.batch_size);
    let total_steps = steps_per_epoch * hp.epochs;
    let mut step = 0usize;
    let mut log = TrainingLog::default();

    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut rng::stream(hp.seed, &[0x7a41, epoch as u64]));
        let mut loss_sum = 0.0f64;
        for (batch_no, idx) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_ds.examples[i]).collect();
            let mut bg = engine.batch_gradient(model, &batch)?;
            let numeric = |message: &str| Error::Numeric {
                epoch,
                batch: batch_no,
                message: message.into(),
            };
            if !bg.loss_sum.is_finite() {
                return Err(numeric("loss is not finite"));
            }
            let inv = 1.0 / bg.n as f32;
            let mut norm2 = 0.0f64;
            for g in &mut bg.grad {
                *g *= inv;
                norm2 += (*g as f64) * (*g as f64);
            }
            if !norm2.is_finite() {
                return Err(numeric("gradient is not finite"));
            }
            let clip = match hp.grad_clip {
                Some(c) if libm::sqrt(norm2) > c => (c / libm::sqrt(norm2)) as f32,
                _ => 1.0,
            };
            loss_sum += bg.loss_sum;

            step += 1;
            let lr = hp.lr_at(step - 1, total_steps) as f32;
            let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
            let bc1 = 1.0 - libm::pow(hp.beta1, step as f64) as f32;
            let bc2 = 1.0 - libm::pow(hp.beta2, step as f64) as f32;
            let (eps, wd) = (hp.eps as f32, hp.weight_decay as f32);
            let params = model.params_mut();
            for i in 0..n_params {
                let g = bg.grad[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if decay[i] {
                    params[i] -= lr * wd * params[i];
                }
                params[i] -= lr * mhat / (libm::sqrtf(vhat) + eps);
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(numeric("parameters became non-finite"));
            }
        }
        let dev_accuracy = if dev_ds.is_empty() {
            None
        } else {
            Some(accuracy_of(engine, model, dev_ds, &PruneMask::none())?)
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_ds.len() as f64,
            dev_accuracy,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_kth_smallest, TaskConfig};
    use crate::toylm::ModelConfig;

    fn setup() -> (Model<f32>, Dataset) {
        let task = TaskConfig::kth(4, 1, 12, 64, 3);
        let ds = gen_kth_smallest(&task, 0).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: task.vocab().model_vocab_size() as usize,
            max_seq_len: 5,
            seed: 4,
        };
        (Model::init_random(cfg).unwrap(), ds)
    }

    fn hp(lr: f64) -> TrainHyper {
        TrainHyper {
            learning_rate: lr,
            batch_size: 20,
            epochs: 1,
            ..TrainHyper::reference_protocol(9)
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, ds) = setup();
        let before = model.params().to_vec();
        train(
            &mut model,
            &ds,
            &Dataset::default(),
            &hp(0.0),
            &Serial,
            |_| {},
        )
        .unwrap();
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (model, ds) = setup();
        let mut hp = hp(1e-2);
        hp.epochs = 8;
        let mut a = model.clone();
        let mut b = model.clone();
        let la = train(&mut a, &ds, &ds, &hp, &Serial, |_| {}).unwrap();
        let lb = train(&mut b, &ds, &ds, &hp, &Serial, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params(), b.params());
        assert!(la.epochs.last().unwrap().train_loss < la.epochs[0].train_loss);
        assert_eq!(la.epochs.len(), 8);
    }

    #[test]
    fn chunked_gradient_matches_whole_batch_sum() {
        let (model, ds) = setup();
        let batch: Vec<&Example> = ds.examples.iter().take(40).collect();
        let bg = Serial.batch_gradient(&model, &batch).unwrap();
        let mut ws = Workspace::new();
        let whole = chunk_gradient(&model, &batch, &mut ws).unwrap();
        assert_eq!(bg.n, 40);
        for (a, b) in bg.grad.iter().zip(&whole.grad) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn empty_evaluation_is_an_input_error() {
        let (model, _) = setup();
        assert!(matches!(
            evaluate_accuracy(&model, &Dataset::default(), &PruneMask::none()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let mut h = hp(1.0);
        h.schedule = LrSchedule::Cosine;
        h.warmup_steps = 2;
        assert!((h.lr_at(0, 10) - 0.5).abs() < 1e-12);
        assert!((h.lr_at(2, 10) - 1.0).abs() < 1e-12);
        assert!(h.lr_at(10, 10).abs() < 1e-12);
    }
}
