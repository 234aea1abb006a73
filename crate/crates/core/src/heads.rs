// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head attention profiles, size and position entropy, and
//! entropy-ordered head pruning.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng;
use crate::taskgen::Dataset;
use crate::toylm::{accuracy_of, GradientEngine, Model, PruneMask};
use crate::trace::{ranking_by_value, SimplifiedAttention, TraceKind};

/// Axis along which a head's expected attention is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistBy {
    /// Statement positions sorted by number value, smallest first.
    Rank,
    /// Statement positions in input order.
    Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub layer: usize,
    pub head: usize,
    pub rank_dist: Vec<f64>,
    pub pos_dist: Vec<f64>,
    pub size_entropy: f64,
    pub position_entropy: f64,
}

/// Expected last-token attention of every head over the statement positions.
///
/// Returns one renormalized distribution per (layer, head), indexed
/// `layer * n_heads + head`. Statements must be single tokens.
pub fn head_distributions(
    traces: &[SimplifiedAttention],
    ds: &Dataset,
    by: DistBy,
) -> Result<Vec<Vec<f64>>> {
    let Some(first) = traces.first() else {
        bail!(Input, "no traces");
    };
    if traces.len() != ds.len() {
        bail!(Data, "{} traces for {} examples", traces.len(), ds.len());
    }
    let (n_layers, n_heads) = (first.n_layers, first.n_heads);
    let m = ds.examples[0].n_statements();
    let mut acc = vec![vec![0.0f64; m]; n_layers * n_heads];
    for (tr, ex) in traces.iter().zip(ds.iter()) {
        if tr.kind != TraceKind::LastToken {
            bail!(
                Input,
                "head distributions need per-head last-token traces, got {:?}",
                tr.kind
            );
        }
        if tr.n_layers != n_layers || tr.n_heads != n_heads || tr.width != ex.tokens.len() {
            bail!(Data, "trace dimensions differ across examples");
        }
        if ex.n_statements() != m
            || ex
                .statement_spans
                .iter()
                .enumerate()
                .any(|(i, &(s, e))| s != i as u32 || e != s + 1)
        {
            bail!(
                Input,
                "head distributions need {m} single-token statements at the leading positions"
            );
        }
        let order: Vec<usize> = match by {
            DistBy::Rank => ranking_by_value(&ex.tokens, m)[..m].to_vec(),
            DistBy::Position => (0..m).collect(),
        };
        for l in 0..n_layers {
            for h in 0..n_heads {
                let row = tr.slice(l, h);
                for (slot, &p) in acc[l * n_heads + h].iter_mut().zip(&order) {
                    *slot += row[p] as f64;
                }
            }
        }
    }
    for dist in &mut acc {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            bail!(Data, "a head puts no attention on any statement");
        }
        dist.iter_mut().for_each(|v| *v /= total);
    }
    Ok(acc)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
///
/// Mass must be non-negative and sum to one within 1e-5; it is renormalized before use.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        bail!(Input, "empty distribution");
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        bail!(Input, "distribution has negative or non-finite mass");
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        bail!(Input, "distribution sums to {total}");
    }
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / total;
            q * libm::log(q)
        })
        .sum::<f64>())
}

/// Rank and position profiles with their entropies for every head.
pub fn head_profiles(traces: &[SimplifiedAttention], ds: &Dataset) -> Result<Vec<HeadProfile>> {
    let rank = head_distributions(traces, ds, DistBy::Rank)?;
    let pos = head_distributions(traces, ds, DistBy::Position)?;
    let n_heads = traces[0].n_heads;
    rank.into_iter()
        .zip(pos)
        .enumerate()
        .map(|(u, (r, p))| {
            Ok(HeadProfile {
                layer: u / n_heads,
                head: u % n_heads,
                size_entropy: entropy(&r)?,
                position_entropy: entropy(&p)?,
                rank_dist: r,
                pos_dist: p,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneCriterion {
    SizeEntropyAscending,
    PositionEntropyAscending,
    Random { seed: u64 },
}

impl PruneCriterion {
    pub fn name(&self) -> &'static str {
        match self {
            PruneCriterion::SizeEntropyAscending => "size_entropy",
            PruneCriterion::PositionEntropyAscending => "position_entropy",
            PruneCriterion::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// Every (layer, head) pair, in pruning order.
    pub ordering: Vec<(usize, usize)>,
    pub criterion: PruneCriterion,
    pub rates: Vec<f64>,
}

impl PruneSchedule {
    /// `round(rate * n_heads)`, halves rounded up.
    pub fn n_pruned(&self, rate: f64) -> usize {
        libm::round(rate * self.ordering.len() as f64) as usize
    }

    /// Mask disabling the first `n_pruned(rate)` heads of the ordering.
    pub fn mask(&self, rate: f64) -> Result<PruneMask> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "pruning rate {rate} outside [0, 1)");
        }
        let n = self.n_pruned(rate).min(self.ordering.len());
        Ok(PruneMask::heads(self.ordering[..n].iter().copied()))
    }
}

/// Order all heads for pruning.
///
/// Entropy criteria sort ascending with ties broken by (layer, head); the
/// random criterion shuffles the (layer, head)-sorted list with its seed.
pub fn make_schedule(
    profiles: &[HeadProfile],
    criterion: PruneCriterion,
    rates: &[f64],
) -> Result<PruneSchedule> {
    let units: BTreeSet<(usize, usize)> = profiles.iter().map(|p| (p.layer, p.head)).collect();
    if units.len() != profiles.len() {
        bail!(Input, "duplicate (layer, head) profiles");
    }
    if let Some(&r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        bail!(Config, "pruning rate {r} outside [0, 1)");
    }
    let mut keyed: Vec<(f64, (usize, usize))> = profiles
        .iter()
        .map(|p| {
            let key = match criterion {
                PruneCriterion::SizeEntropyAscending => p.size_entropy,
                PruneCriterion::PositionEntropyAscending => p.position_entropy,
                PruneCriterion::Random { .. } => 0.0,
            };
            (key, (p.layer, p.head))
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut ordering: Vec<(usize, usize)> = keyed.into_iter().map(|(_, u)| u).collect();
    if let PruneCriterion::Random { seed } = criterion {
        ordering.shuffle(&mut rng::stream(seed, &[0x4ead]));
    }
    Ok(PruneSchedule {
        ordering,
        criterion,
        rates: rates.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rate: f64,
    pub n_pruned: usize,
    pub accuracy: f64,
}

/// Test accuracy with the first `round(rate * L * H)` heads of the schedule disabled.
pub fn pruning_curve<E: GradientEngine + ?Sized>(
    engine: &E,
    model: &Model<f32>,
    test_ds: &Dataset,
    schedule: &PruneSchedule,
) -> Result<Vec<CurvePoint>> {
    if schedule.ordering.len() != model.config().n_units() {
        bail!(
            Input,
            "schedule covers {} heads, model has {}",
            schedule.ordering.len(),
            model.config().n_units()
        );
    }
    schedule
        .rates
        .iter()
        .map(|&rate| {
            let mask = schedule.mask(rate)?;
            Ok(CurvePoint {
                rate,
                n_pruned: mask.disabled_heads.len(),
                accuracy: accuracy_of(engine, model, test_ds, &mask)?,
            })
        })
        .collect()
}

/// One row of `head_entropy.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntropyRow {
    pub layer: usize,
    pub head: usize,
    pub size_entropy: f64,
    pub position_entropy: f64,
}

impl From<&HeadProfile> for HeadEntropyRow {
    fn from(p: &HeadProfile) -> Self {
        Self {
            layer: p.layer,
            head: p.head,
            size_entropy: p.size_entropy,
            position_entropy: p.position_entropy,
        }
    }
}

/// One row of `pruning_curve.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningCurveRow {
    pub criterion: String,
    pub rate: f64,
    pub accuracy: f64,
}
