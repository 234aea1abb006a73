// SPDX-License-Identifier: MIT OR Apache-2.0

//! Correlation of probe scores with accuracy, robustness under corruption,
//! greedy layer pruning and heatmap export.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::probe::{
    build_instances, f1_macro, normalize_score, DataSplits, Knn, ProbeConfig, ProbeInstance,
    TraceSplits,
};
use crate::rng;
use crate::taskgen::{corrupt_useless, Dataset, Example, Vocab};
use crate::toylm::{accuracy_of, GradientEngine, Model, PruneMask, Workspace};
use crate::trace::{SimplifiedAttention, TraceKind};

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        bail!(Input, "series lengths differ: {} and {}", x.len(), y.len());
    }
    if x.len() < 2 {
        bail!(Input, "correlation needs at least two points");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(String::from(
            "one of the series is constant",
        )));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Whether the model's argmax prediction is the gold answer, per example.
pub fn per_example_correct(
    model: &Model<f32>,
    examples: &[Example],
    mask: &PruneMask,
) -> Result<Vec<bool>> {
    let mut ws = Workspace::new();
    examples
        .iter()
        .map(|ex| Ok(model.predict(&ex.tokens, mask, &mut ws)? == ex.answer))
        .collect()
}

/// Traces and datasets feeding the probe.
#[derive(Debug, Clone, Copy)]
pub struct ProbeInputs<'a> {
    pub model: TraceSplits<'a>,
    pub rand: TraceSplits<'a>,
    pub ds: DataSplits<'a>,
    pub cfg: &'a ProbeConfig,
}

/// (gold, model prediction, random-model prediction) for one probe instance.
type Triple = (u32, u32, u32);

#[derive(Debug, Clone, Default)]
struct ExampleScores {
    useful: Vec<Triple>,
    height: Vec<Triple>,
}

/// Per-example probe predictions from kNNs fitted once on the train split.
#[derive(Debug, Clone)]
pub struct SubsetScorer {
    per_example: Vec<ExampleScores>,
}

fn fitted(train: &[ProbeInstance], k: usize, height: bool) -> Result<Knn> {
    let (x, y): (Vec<Vec<f64>>, Vec<u32>) = train
        .iter()
        .filter_map(|i| {
            let y = if height { i.height? } else { i.useful as u32 };
            Some((i.features.clone(), y))
        })
        .unzip();
    Knn::fit(&x, &y, k.min(x.len().max(1)))
}

impl SubsetScorer {
    pub fn new(inputs: ProbeInputs<'_>) -> Result<Self> {
        let k = inputs.cfg.k_neighbors;
        let prefix = inputs.cfg.prefix;
        let mtr = build_instances(inputs.model.train, inputs.ds.train, prefix)?;
        let rtr = build_instances(inputs.rand.train, inputs.ds.train, prefix)?;
        let mte = build_instances(inputs.model.test, inputs.ds.test, prefix)?;
        let rte = build_instances(inputs.rand.test, inputs.ds.test, prefix)?;
        let (mu, mh) = (fitted(&mtr, k, false)?, fitted(&mtr, k, true)?);
        let (ru, rh) = (fitted(&rtr, k, false)?, fitted(&rtr, k, true)?);
        let mut per_example = vec![ExampleScores::default(); inputs.ds.test.len()];
        let mut scratch = Vec::new();
        let mut cursor = 0usize;
        for (e, ex) in inputs.ds.test.iter().enumerate() {
            for _ in 0..ex.n_statements() {
                let (mi, ri) = (&mte[cursor], &rte[cursor]);
                cursor += 1;
                let slot = &mut per_example[e];
                slot.useful.push((
                    mi.useful as u32,
                    mu.predict_one(&mi.features, &mut scratch)?,
                    ru.predict_one(&ri.features, &mut scratch)?,
                ));
                if let Some(h) = mi.height {
                    slot.height.push((
                        h,
                        mh.predict_one(&mi.features, &mut scratch)?,
                        rh.predict_one(&ri.features, &mut scratch)?,
                    ));
                }
            }
        }
        Ok(Self { per_example })
    }

    pub fn len(&self) -> usize {
        self.per_example.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_example.is_empty()
    }

    fn normalized(triples: &[Triple]) -> Result<Option<f64>> {
        if triples.is_empty() {
            return Ok(None);
        }
        let gold: Vec<u32> = triples.iter().map(|t| t.0).collect();
        let pm: Vec<u32> = triples.iter().map(|t| t.1).collect();
        let pr: Vec<u32> = triples.iter().map(|t| t.2).collect();
        match normalize_score(f1_macro(&gold, &pm)?, f1_macro(&gold, &pr)?) {
            Ok(s) => Ok(Some(s)),
            Err(Error::DegenerateBaseline(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Normalized usefulness and height scores over the given test examples.
    pub fn scores(&self, examples: &[usize]) -> Result<(Option<f64>, Option<f64>)> {
        let mut useful = Vec::new();
        let mut height = Vec::new();
        for &e in examples {
            let Some(s) = self.per_example.get(e) else {
                bail!(Input, "example index {e} outside the test split");
            };
            useful.extend_from_slice(&s.useful);
            height.extend_from_slice(&s.height);
        }
        Ok((Self::normalized(&useful)?, Self::normalized(&height)?))
    }
}

fn draw_subset(n: usize, lo: usize, hi: usize, seed: u64, tag: u64, r: usize) -> Vec<usize> {
    let mut g = rng::stream(seed, &[tag, r as u64]);
    let size = g.random_range(lo..=hi);
    let mut idx = index::sample(&mut g, n, size).into_vec();
    idx.sort_unstable();
    idx
}

fn check_bounds(n: usize, lo: usize, hi: usize) -> Result<()> {
    if lo == 0 || lo > hi {
        bail!(
            Config,
            "subset bounds ({lo}, {hi}) must satisfy 1 <= lo <= hi"
        );
    }
    if hi > n {
        bail!(
            Config,
            "subset upper bound {hi} exceeds the {n} available examples"
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub resample: usize,
    pub size: usize,
    pub accuracy: f64,
    pub s_p1: Option<f64>,
    pub s_p2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_resamples: usize,
    pub subset_lo: usize,
    pub subset_hi: usize,
    pub rho_acc_p1: Option<f64>,
    pub rho_acc_p2: Option<f64>,
    pub rho_p1_p2: Option<f64>,
    pub rows: Vec<SubsetRow>,
    /// Why a coefficient is missing, if one is.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn rho(
    name: &str,
    pairs: impl Iterator<Item = Option<(f64, f64)>>,
    notes: &mut Vec<String>,
) -> Result<Option<f64>> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.flatten().unzip();
    if x.len() < 2 {
        notes.push(format!(
            "{name}: fewer than two resamples with defined scores"
        ));
        return Ok(None);
    }
    match pearson(&x, &y) {
        Ok(r) => Ok(Some(r)),
        Err(Error::UndefinedCorrelation(m)) => {
            notes.push(format!("{name}: {m}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Correlate subset accuracy with subset probe scores over random test subsets.
#[allow(clippy::too_many_arguments)]
pub fn correlate_scores(
    inputs: ProbeInputs<'_>,
    model: &Model<f32>,
    n_resamples: usize,
    subset_lo: usize,
    subset_hi: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let test = inputs.ds.test;
    check_bounds(test.len(), subset_lo, subset_hi)?;
    let correct = per_example_correct(model, &test.examples, &PruneMask::none())?;
    let scorer = SubsetScorer::new(inputs)?;
    let mut rows = Vec::with_capacity(n_resamples);
    for r in 0..n_resamples {
        let idx = draw_subset(test.len(), subset_lo, subset_hi, seed, 0xc0e1, r);
        let hits = idx.iter().filter(|&&i| correct[i]).count();
        let (s_p1, s_p2) = scorer.scores(&idx)?;
        rows.push(SubsetRow {
            resample: r,
            size: idx.len(),
            accuracy: hits as f64 / idx.len() as f64,
            s_p1,
            s_p2,
        });
    }
    let mut notes = Vec::new();
    let rho_acc_p1 = rho(
        "accuracy vs S_P1",
        rows.iter().map(|r| r.s_p1.map(|s| (r.accuracy, s))),
        &mut notes,
    )?;
    let rho_acc_p2 = rho(
        "accuracy vs S_P2",
        rows.iter().map(|r| r.s_p2.map(|s| (r.accuracy, s))),
        &mut notes,
    )?;
    let rho_p1_p2 = rho(
        "S_P1 vs S_P2",
        rows.iter().map(|r| r.s_p1.zip(r.s_p2)),
        &mut notes,
    )?;
    Ok(CorrelationReport {
        n_resamples,
        subset_lo,
        subset_hi,
        rho_acc_p1,
        rho_acc_p2,
        rho_p1_p2,
        rows,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean of (corrupted accuracy - clean accuracy); `None` for an empty bin.
    pub mean_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub n_bins: usize,
    pub bins: Vec<RobustnessBin>,
    /// Subsets that entered the histogram.
    pub n_subsets: usize,
    /// Subsets whose S_P2 was undefined.
    pub n_undefined: usize,
    /// Test examples without a useless statement to corrupt.
    pub n_skipped_examples: usize,
    pub clean_accuracy: f64,
    pub corrupted_accuracy: f64,
}

/// Equal-width bins over `[min, max]` of the scores; the top edge is inclusive.
pub fn bin_equal_width(
    scores: &[f64],
    deltas: &[f64],
    n_bins: usize,
) -> Result<Vec<RobustnessBin>> {
    if n_bins == 0 {
        bail!(Config, "need at least one bin");
    }
    if scores.len() != deltas.len() {
        bail!(Input, "{} scores for {} deltas", scores.len(), deltas.len());
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| {
            (a.min(s), b.max(s))
        });
    let (lo, hi) = if scores.is_empty() {
        (0.0, 0.0)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / n_bins as f64;
    let mut sums = vec![(0usize, 0.0f64); n_bins];
    for (&s, &d) in scores.iter().zip(deltas) {
        let b = if width > 0.0 {
            (((s - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        sums[b].0 += 1;
        sums[b].1 += d;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (count, sum))| RobustnessBin {
            lo: lo + width * b as f64,
            hi: if b + 1 == n_bins {
                hi
            } else {
                lo + width * (b + 1) as f64
            },
            count,
            mean_delta: (count > 0).then(|| sum / count as f64),
        })
        .collect())
}

/// Accuracy change after flipping one useless statement per example, binned by subset S_P2.
#[allow(clippy::too_many_arguments)]
pub fn robustness_report(
    inputs: ProbeInputs<'_>,
    model: &Model<f32>,
    vocab: &Vocab,
    n_bins: usize,
    n_resamples: usize,
    subset_lo: usize,
    subset_hi: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    let test = inputs.ds.test;
    let mut usable = Vec::new();
    let mut corrupted = Vec::new();
    for (i, ex) in test.iter().enumerate() {
        match corrupt_useless(ex, vocab, seed) {
            Ok(c) => {
                usable.push(i);
                corrupted.push(c);
            }
            Err(Error::Precondition(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if usable.is_empty() {
        bail!(Input, "no test example has a useless statement to corrupt");
    }
    check_bounds(usable.len(), subset_lo, subset_hi)?;
    let clean_examples: Vec<Example> = usable.iter().map(|&i| test.examples[i].clone()).collect();
    let clean = per_example_correct(model, &clean_examples, &PruneMask::none())?;
    let dirty = per_example_correct(model, &corrupted, &PruneMask::none())?;
    let scorer = SubsetScorer::new(inputs)?;
    let (mut scores, mut deltas) = (Vec::new(), Vec::new());
    let mut n_undefined = 0;
    for r in 0..n_resamples {
        let pick = draw_subset(usable.len(), subset_lo, subset_hi, seed, 0x0b05, r);
        let test_idx: Vec<usize> = pick.iter().map(|&p| usable[p]).collect();
        let (_, s_p2) = scorer.scores(&test_idx)?;
        let Some(s) = s_p2 else {
            n_undefined += 1;
            continue;
        };
        let n = pick.len() as f64;
        let before = pick.iter().filter(|&&p| clean[p]).count() as f64 / n;
        let after = pick.iter().filter(|&&p| dirty[p]).count() as f64 / n;
        scores.push(s);
        deltas.push(after - before);
    }
    let frac = |v: &[bool]| v.iter().filter(|&&c| c).count() as f64 / v.len() as f64;
    Ok(RobustnessReport {
        n_bins,
        bins: bin_equal_width(&scores, &deltas, n_bins)?,
        n_subsets: scores.len(),
        n_undefined,
        n_skipped_examples: test.len() - usable.len(),
        clean_accuracy: frac(&clean),
        corrupted_accuracy: frac(&dirty),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneStep {
    pub layer: usize,
    pub accuracy: f64,
    pub cumulative_drop: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneReport {
    pub budget: f64,
    pub base_accuracy: f64,
    pub steps: Vec<LayerPruneStep>,
    pub disabled_layers: BTreeSet<usize>,
    pub final_accuracy: f64,
}

impl LayerPruneReport {
    pub fn mask(&self) -> PruneMask {
        PruneMask::layers(self.disabled_layers.iter().copied())
    }
}

/// Disable attention sublayers from the top down while the total dev-accuracy drop stays under `budget`.
///
/// A step that does not lower accuracy is always kept.
pub fn greedy_layer_prune<E: GradientEngine + ?Sized>(
    engine: &E,
    model: &Model<f32>,
    dev_ds: &Dataset,
    budget: f64,
) -> Result<LayerPruneReport> {
    if !(0.0..1.0).contains(&budget) {
        bail!(Config, "layer pruning budget {budget} outside [0, 1)");
    }
    let base = accuracy_of(engine, model, dev_ds, &PruneMask::none())?;
    let mut disabled = BTreeSet::new();
    let mut current = base;
    let mut steps = Vec::new();
    for layer in (0..model.config().n_layers).rev() {
        let mut trial = disabled.clone();
        trial.insert(layer);
        let acc = accuracy_of(
            engine,
            model,
            dev_ds,
            &PruneMask::layers(trial.iter().copied()),
        )?;
        let drop = base - acc;
        let accepted = drop <= 0.0 || drop < budget;
        if accepted {
            disabled = trial;
            current = acc;
        }
        steps.push(LayerPruneStep {
            layer,
            accuracy: acc,
            cumulative_drop: drop,
            accepted,
        });
    }
    Ok(LayerPruneReport {
        budget,
        base_accuracy: base,
        steps,
        disabled_layers: disabled,
        final_accuracy: current,
    })
}

/// One cell of a heatmap CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub index: usize,
    pub value: f32,
}

/// Cells of a single-head trace, layer-major.
pub fn heatmap_rows(trace: &SimplifiedAttention) -> Result<Vec<HeatmapRow>> {
    let two_d = matches!(
        trace.kind,
        TraceKind::HeadPooled | TraceKind::CrossPooled | TraceKind::RankPermuted
    );
    if !two_d || trace.n_heads != 1 {
        bail!(
            Input,
            "heatmaps need a head-pooled trace, got {:?} with {} heads",
            trace.kind,
            trace.n_heads
        );
    }
    Ok((0..trace.n_layers)
        .flat_map(|l| {
            trace
                .slice(l, 0)
                .iter()
                .enumerate()
                .map(move |(index, &value)| HeatmapRow {
                    layer: l,
                    index,
                    value,
                })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(
            (pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap()
                - 5.5 / 43.75f64.sqrt())
            .abs()
                < 1e-12
        );
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn bins_cover_range_and_counts_add_up() {
        let s = [0.0, 0.1, 0.5, 0.99, 1.0];
        let d = [-1.0, 1.0, 0.0, 0.5, 0.5];
        let bins = bin_equal_width(&s, &d, 4).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(bins[0].count, 2);
        assert_eq!(bins[0].mean_delta, Some(0.0));
        assert_eq!(bins[3].count, 2);
        assert_eq!(bins[1].mean_delta, None);
        assert_eq!(bins[3].hi, 1.0);
        let flat = bin_equal_width(&[0.3, 0.3], &[1.0, 0.0], 8).unwrap();
        assert_eq!(flat[0].count, 2);
        assert!(bin_equal_width(&s, &d, 0).is_err());
    }

    #[test]
    fn heatmap_shape() {
        let t = SimplifiedAttention::new(TraceKind::HeadPooled, 12, 1, 16, vec![0.5; 192]).unwrap();
        let rows = heatmap_rows(&t).unwrap();
        assert_eq!(rows.len(), 192);
        assert_eq!(
            rows[17],
            HeatmapRow {
                layer: 1,
                index: 1,
                value: 0.5
            }
        );
        let per_head =
            SimplifiedAttention::new(TraceKind::LastToken, 1, 2, 3, vec![0.1; 6]).unwrap();
        assert!(heatmap_rows(&per_head).is_err());
    }
}
