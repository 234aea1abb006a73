// SPDX-License-Identifier: MIT OR Apache-2.0

//! The probe: a k-nearest-neighbour classifier over per-statement attention
//! features, scored with F1-macro and normalized against a random-init model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::taskgen::Dataset;
use crate::trace::{SimplifiedAttention, TraceKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub k_neighbors: usize,
    /// Use only the first `prefix` layers of every trace.
    pub prefix: Option<usize>,
    /// Keep one feature per (layer, head) instead of head-pooled features.
    pub per_head: bool,
    /// Restrict head pooling to these (layer, head) pairs.
    pub head_subset: Option<Vec<(usize, usize)>>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            prefix: None,
            per_head: false,
            head_subset: None,
        }
    }
}

impl ProbeConfig {
    /// Trace kind the probe reads for a task whose statements are single tokens or not.
    pub fn trace_kind(&self, single_token_statements: bool) -> TraceKind {
        match (single_token_statements, self.per_head) {
            (true, false) => TraceKind::HeadPooled,
            (true, true) => TraceKind::LastToken,
            (false, false) => TraceKind::CrossPooled,
            (false, true) => TraceKind::CrossHypernode,
        }
    }
}

/// One statement of one example, with its attention features and tree labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInstance {
    pub example_id: u64,
    pub unit_index: usize,
    pub features: Vec<f64>,
    pub useful: bool,
    pub height: Option<u32>,
}

/// Build one instance per statement of every example.
///
/// Token-level traces (`LastToken`, `HeadPooled`) average the columns of a
/// statement's tokens; statement-level traces (`CrossHypernode`,
/// `CrossPooled`) read slot `i` for statement `i` and ignore the question slot.
pub fn build_instances(
    traces: &[SimplifiedAttention],
    ds: &Dataset,
    prefix: Option<usize>,
) -> Result<Vec<ProbeInstance>> {
    if traces.len() != ds.len() {
        bail!(Data, "{} traces for {} examples", traces.len(), ds.len());
    }
    let mut out = Vec::new();
    for (tr, ex) in traces.iter().zip(ds.iter()) {
        if let Some(id) = tr.provenance.example_id {
            if id != ex.id {
                bail!(Data, "trace for example {id} paired with example {}", ex.id);
            }
        }
        let n_layers = match prefix {
            None => tr.n_layers,
            Some(l) if l >= 1 && l <= tr.n_layers => l,
            Some(l) => bail!(Input, "prefix {l} outside 1..={}", tr.n_layers),
        };
        let token_level = match tr.kind {
            TraceKind::LastToken | TraceKind::HeadPooled => true,
            TraceKind::CrossHypernode | TraceKind::CrossPooled => false,
            TraceKind::RankPermuted => {
                bail!(Input, "rank-permuted traces carry no statement positions")
            }
        };
        if token_level && tr.width != ex.tokens.len() {
            bail!(
                Data,
                "trace width {} but example {} has {} tokens",
                tr.width,
                ex.id,
                ex.tokens.len()
            );
        }
        if !token_level && tr.width != ex.n_statements() + 1 {
            bail!(
                Data,
                "trace width {} but example {} has {} statements",
                tr.width,
                ex.id,
                ex.n_statements()
            );
        }
        for (i, &(s, e)) in ex.statement_spans.iter().enumerate() {
            let mut features = Vec::with_capacity(n_layers * tr.n_heads);
            for l in 0..n_layers {
                for h in 0..tr.n_heads {
                    let row = tr.slice(l, h);
                    let v = if token_level {
                        let cols = &row[s as usize..e as usize];
                        cols.iter().map(|&x| x as f64).sum::<f64>() / cols.len() as f64
                    } else {
                        row[i] as f64
                    };
                    features.push(v);
                }
            }
            let height = ex.tree.height_of(i as u32);
            out.push(ProbeInstance {
                example_id: ex.id,
                unit_index: i,
                features,
                useful: height.is_some(),
                height,
            });
        }
    }
    Ok(out)
}

/// Brute-force k-nearest-neighbour classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    k: usize,
    dim: usize,
    points: Vec<f64>,
    labels: Vec<u32>,
}

impl Knn {
    pub fn fit(points: &[Vec<f64>], labels: &[u32], k: usize) -> Result<Self> {
        if points.is_empty() {
            bail!(Input, "empty training set");
        }
        if points.len() != labels.len() {
            bail!(Input, "{} points but {} labels", points.len(), labels.len());
        }
        if k == 0 || k > points.len() {
            bail!(Input, "k = {k} outside 1..={}", points.len());
        }
        let dim = points[0].len();
        if dim == 0 {
            bail!(Input, "empty feature vectors");
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                bail!(Input, "feature length {} differs from {dim}", p.len());
            }
            if p.iter().any(|v| !v.is_finite()) {
                bail!(Input, "non-finite feature");
            }
            flat.extend_from_slice(p);
        }
        Ok(Self {
            k,
            dim,
            points: flat,
            labels: labels.to_vec(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Majority label among the `k` nearest points.
    ///
    /// Equal distances go to the earlier training point; equal votes go to the smaller label.
    pub fn predict_one(&self, query: &[f64], scratch: &mut Vec<(f64, u32)>) -> Result<u32> {
        if query.len() != self.dim {
            bail!(
                Input,
                "query length {} differs from {}",
                query.len(),
                self.dim
            );
        }
        scratch.clear();
        for (idx, p) in self.points.chunks_exact(self.dim).enumerate() {
            let d: f64 = p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            scratch.push((d, idx as u32));
        }
        if self.k < scratch.len() {
            scratch
                .select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &(_, idx) in &scratch[..self.k] {
            *votes.entry(self.labels[idx as usize]).or_default() += 1;
        }
        let mut best = (0u32, 0usize);
        for (&label, &n) in &votes {
            if n > best.1 {
                best = (label, n);
            }
        }
        Ok(best.0)
    }

    pub fn predict(&self, queries: &[Vec<f64>]) -> Result<Vec<u32>> {
        let mut scratch = Vec::with_capacity(self.labels.len());
        queries
            .iter()
            .map(|q| self.predict_one(q, &mut scratch))
            .collect()
    }
}

/// Unweighted mean over the classes present in `gold` of the per-class F1.
pub fn f1_macro(gold: &[u32], pred: &[u32]) -> Result<f64> {
    if gold.is_empty() {
        bail!(Input, "empty label vector");
    }
    if gold.len() != pred.len() {
        bail!(
            Input,
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        );
    }
    let mut counts: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    for &g in gold {
        counts.entry(g).or_default();
    }
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            counts.get_mut(&g).expect("gold class")[0] += 1;
        } else {
            counts.get_mut(&g).expect("gold class")[2] += 1;
            if let Some(c) = counts.get_mut(&p) {
                c[1] += 1;
            }
        }
    }
    let mut sum = 0.0;
    for [tp, fp, fn_] in counts.values() {
        let denom = 2 * tp + fp + fn_;
        if *tp > 0 {
            sum += (2 * tp) as f64 / denom as f64;
        }
    }
    Ok(sum / counts.len() as f64)
}

/// `(f1_model - f1_rand) / (1 - f1_rand)`, unclamped.
pub fn normalize_score(f1_model: f64, f1_rand: f64) -> Result<f64> {
    if !f1_model.is_finite() || !f1_rand.is_finite() {
        bail!(Input, "non-finite F1 ({f1_model}, {f1_rand})");
    }
    if f1_rand >= 1.0 {
        return Err(Error::DegenerateBaseline(format!(
            "random baseline F1 is {f1_rand}"
        )));
    }
    Ok((f1_model - f1_rand) / (1.0 - f1_rand))
}

/// Traces of one model over the probe's train and test splits.
#[derive(Debug, Clone, Copy)]
pub struct TraceSplits<'a> {
    pub train: &'a [SimplifiedAttention],
    pub test: &'a [SimplifiedAttention],
}

#[derive(Debug, Clone, Copy)]
pub struct DataSplits<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Raw and normalized result of one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub raw_f1: f64,
    pub rand_f1: f64,
    /// Absent when the random baseline is already perfect.
    pub normalized: Option<f64>,
}

impl ProbeScore {
    fn new(raw_f1: f64, rand_f1: f64) -> Result<Self> {
        let normalized = match normalize_score(raw_f1, rand_f1) {
            Ok(s) => Some(s),
            Err(Error::DegenerateBaseline(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            raw_f1,
            rand_f1,
            normalized,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layers: usize,
    pub usefulness: ProbeScore,
    pub height: ProbeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config: ProbeConfig,
    pub raw_f1_usefulness: f64,
    pub rand_f1_usefulness: f64,
    pub s_p1: Option<f64>,
    pub raw_f1_height: f64,
    pub rand_f1_height: f64,
    pub s_p2: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer: Vec<LayerScores>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_height_f1: BTreeMap<u32, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Copy)]
enum Target {
    Usefulness,
    Height,
    OneVsRest(u32),
}

impl Target {
    /// Label of an instance, or `None` when the instance is outside this probe.
    fn label(self, inst: &ProbeInstance) -> Option<u32> {
        match self {
            Target::Usefulness => Some(inst.useful as u32),
            Target::Height => inst.height,
            Target::OneVsRest(h) => Some((inst.height == Some(h)) as u32),
        }
    }
}

fn labelled(instances: &[ProbeInstance], target: Target) -> (Vec<Vec<f64>>, Vec<u32>) {
    instances
        .iter()
        .filter_map(|i| target.label(i).map(|y| (i.features.clone(), y)))
        .unzip()
}

fn fit_and_score(
    train: &[ProbeInstance],
    test: &[ProbeInstance],
    target: Target,
    k: usize,
) -> Result<f64> {
    let (xtr, ytr) = labelled(train, target);
    let (xte, yte) = labelled(test, target);
    if xte.is_empty() {
        bail!(Input, "no test instances for this probe");
    }
    let knn = Knn::fit(&xtr, &ytr, k.min(xtr.len().max(1)))?;
    let pred = knn.predict(&xte)?;
    f1_macro(&yte, &pred)
}

struct Instances {
    train: Vec<ProbeInstance>,
    test: Vec<ProbeInstance>,
}

fn instances(t: TraceSplits<'_>, ds: DataSplits<'_>, prefix: Option<usize>) -> Result<Instances> {
    Ok(Instances {
        train: build_instances(t.train, ds.train, prefix)?,
        test: build_instances(t.test, ds.test, prefix)?,
    })
}

fn score_pair(model: &Instances, rand: &Instances, target: Target, k: usize) -> Result<ProbeScore> {
    let raw = fit_and_score(&model.train, &model.test, target, k)?;
    let rnd = fit_and_score(&rand.train, &rand.test, target, k)?;
    ProbeScore::new(raw, rnd)
}

/// Binary probe: is a statement part of the reasoning tree?
pub fn probe_usefulness(
    model: TraceSplits<'_>,
    rand: TraceSplits<'_>,
    ds: DataSplits<'_>,
    cfg: &ProbeConfig,
) -> Result<ProbeScore> {
    let m = instances(model, ds, cfg.prefix)?;
    let r = instances(rand, ds, cfg.prefix)?;
    score_pair(&m, &r, Target::Usefulness, cfg.k_neighbors)
}

/// Height probe over the statements that are in the tree.
///
/// When every tree node has the same height the classifier is trivially
/// perfect: both F1 values are 1 and the normalized score is absent.
pub fn probe_height(
    model: TraceSplits<'_>,
    rand: TraceSplits<'_>,
    ds: DataSplits<'_>,
    cfg: &ProbeConfig,
) -> Result<ProbeScore> {
    let m = instances(model, ds, cfg.prefix)?;
    let r = instances(rand, ds, cfg.prefix)?;
    score_pair(&m, &r, Target::Height, cfg.k_neighbors)
}

/// Both probes on the first `l` layers, for `l = 1..=L`.
pub fn layerwise_probe(
    model: TraceSplits<'_>,
    rand: TraceSplits<'_>,
    ds: DataSplits<'_>,
    cfg: &ProbeConfig,
) -> Result<Vec<LayerScores>> {
    let n_layers = model.train.first().map(|t| t.n_layers).unwrap_or(0);
    if n_layers == 0 {
        bail!(Input, "no traces to probe");
    }
    (1..=n_layers)
        .map(|l| {
            let m = instances(model, ds, Some(l))?;
            let r = instances(rand, ds, Some(l))?;
            Ok(LayerScores {
                layers: l,
                usefulness: score_pair(&m, &r, Target::Usefulness, cfg.k_neighbors)?,
                height: score_pair(&m, &r, Target::Height, cfg.k_neighbors)?,
            })
        })
        .collect()
}

/// One-vs-rest F1 for "statement is a tree node of height `h`", per layer prefix.
pub fn per_height_probe(
    model: TraceSplits<'_>,
    ds: DataSplits<'_>,
    heights: &[u32],
    cfg: &ProbeConfig,
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let n_layers = model.train.first().map(|t| t.n_layers).unwrap_or(0);
    if n_layers == 0 {
        bail!(Input, "no traces to probe");
    }
    for &h in heights {
        let present = ds
            .train
            .iter()
            .chain(ds.test.iter())
            .any(|ex| ex.tree.heights.contains(&h));
        if !present {
            bail!(Input, "no statement has height {h}");
        }
    }
    let mut out: BTreeMap<u32, Vec<f64>> = heights
        .iter()
        .map(|&h| (h, Vec::with_capacity(n_layers)))
        .collect();
    for l in 1..=n_layers {
        let m = instances(model, ds, Some(l))?;
        for &h in heights {
            let f1 = fit_and_score(&m.train, &m.test, Target::OneVsRest(h), cfg.k_neighbors)?;
            out.get_mut(&h).expect("height key").push(f1);
        }
    }
    Ok(out)
}

/// Full probe run: both scores, plus the layer-wise curve when `layerwise` is set.
pub fn run_probe(
    model: TraceSplits<'_>,
    rand: TraceSplits<'_>,
    ds: DataSplits<'_>,
    cfg: &ProbeConfig,
    layerwise: bool,
) -> Result<ProbeReport> {
    let m = instances(model, ds, cfg.prefix)?;
    let r = instances(rand, ds, cfg.prefix)?;
    let useful = score_pair(&m, &r, Target::Usefulness, cfg.k_neighbors)?;
    let height = score_pair(&m, &r, Target::Height, cfg.k_neighbors)?;
    let mut notes = Vec::new();
    if useful.normalized.is_none() {
        notes.push(String::from(
            "usefulness probe is degenerate: the random baseline is already perfect",
        ));
    }
    if height.normalized.is_none() {
        notes.push(String::from(
            "height probe is degenerate: all tree nodes share one height",
        ));
    }
    let per_layer = if layerwise {
        layerwise_probe(model, rand, ds, cfg)?
    } else {
        Vec::new()
    };
    Ok(ProbeReport {
        config: cfg.clone(),
        raw_f1_usefulness: useful.raw_f1,
        rand_f1_usefulness: useful.rand_f1,
        s_p1: useful.normalized,
        raw_f1_height: height.raw_f1,
        rand_f1_height: height.rand_f1,
        s_p2: height.normalized,
        per_layer,
        per_height_f1: BTreeMap::new(),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_kth_smallest, TaskConfig};
    use alloc::vec;

    #[test]
    fn f1_hand_examples() {
        let f = f1_macro(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert!((f - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        assert_eq!(f1_macro(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let f = f1_macro(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert!(f1_macro(&[], &[]).is_err());
        assert!(f1_macro(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn prediction_only_classes_do_not_count() {
        // class 2 appears only in predictions
        let f = f1_macro(&[0, 0], &[0, 2]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_fixed_points() {
        let s = normalize_score(0.9636, 0.4838).unwrap();
        assert!((s * 100.0 - 92.94).abs() < 0.01);
        assert_eq!(normalize_score(0.4, 0.4).unwrap(), 0.0);
        assert_eq!(normalize_score(1.0, 0.3).unwrap(), 1.0);
        assert!(matches!(
            normalize_score(0.9, 1.0),
            Err(Error::DegenerateBaseline(_))
        ));
        assert!(normalize_score(0.1, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn knn_small_cases() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let knn = Knn::fit(&pts, &[7, 9], 1).unwrap();
        assert_eq!(knn.predict(&[vec![0.1, 0.0]]).unwrap(), vec![7]);
        assert_eq!(knn.predict(&[vec![1.0, 1.0]]).unwrap(), vec![9]);
        // equidistant query: the earlier point wins
        assert_eq!(knn.predict(&[vec![0.5, 0.5]]).unwrap(), vec![7]);
        let knn = Knn::fit(&pts, &[7, 9], 2).unwrap();
        // one vote each: the smaller label wins
        assert_eq!(knn.predict(&[vec![5.0, 5.0]]).unwrap(), vec![7]);
        assert!(Knn::fit(&[], &[], 1).is_err());
        assert!(Knn::fit(&pts, &[1, 2], 3).is_err());
        assert!(Knn::fit(&pts, &[1, 2], 0).is_err());
    }

    #[test]
    fn knn_with_k_equal_to_n_returns_majority() {
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        let labels = [3, 1, 3, 1, 3, 0, 0];
        let knn = Knn::fit(&pts, &labels, 7).unwrap();
        for q in [-10.0, 2.5, 100.0] {
            assert_eq!(knn.predict(&[vec![q]]).unwrap(), vec![3]);
        }
    }

    fn oracle_traces(ds: &Dataset, informative: bool) -> Vec<SimplifiedAttention> {
        ds.iter()
            .map(|ex| {
                let t = ex.tokens.len();
                let mut v = vec![0.0f32; 2 * t];
                for l in 0..2 {
                    for (i, _) in ex.statement_spans.iter().enumerate() {
                        v[l * t + i] = match (informative, ex.tree.height_of(i as u32)) {
                            (true, Some(h)) => 0.5 + 0.2 * h as f32,
                            (true, None) => 0.01,
                            (false, _) => 0.1,
                        };
                    }
                }
                SimplifiedAttention::new(TraceKind::HeadPooled, 2, 1, t, v)
                    .unwrap()
                    .with_example(ex.id)
            })
            .collect()
    }

    #[test]
    fn informative_traces_score_one_and_identical_score_zero() {
        let train = gen_kth_smallest(&TaskConfig::kth(6, 2, 20, 40, 1), 0).unwrap();
        let test = gen_kth_smallest(&TaskConfig::kth(6, 2, 20, 20, 1), 1).unwrap();
        let ds = DataSplits {
            train: &train,
            test: &test,
        };
        let (gtr, gte) = (oracle_traces(&train, true), oracle_traces(&test, true));
        let (ftr, fte) = (oracle_traces(&train, false), oracle_traces(&test, false));
        let good = TraceSplits {
            train: &gtr,
            test: &gte,
        };
        let flat = TraceSplits {
            train: &ftr,
            test: &fte,
        };
        let cfg = ProbeConfig::default();
        let r = run_probe(good, flat, ds, &cfg, true).unwrap();
        assert_eq!(r.raw_f1_usefulness, 1.0);
        assert_eq!(r.s_p1, Some(1.0));
        assert_eq!(r.s_p2, Some(1.0));
        assert_eq!(r.per_layer.len(), 2);
        assert_eq!(r.per_layer[1].usefulness.normalized, r.s_p1);
        let same = probe_usefulness(flat, flat, ds, &cfg).unwrap();
        assert_eq!(same.normalized, Some(0.0));
        let ph = per_height_probe(good, ds, &[0, 1], &cfg).unwrap();
        assert_eq!(ph[&0], vec![1.0, 1.0]);
        assert!(per_height_probe(good, ds, &[2], &cfg).is_err());
    }

    #[test]
    fn single_height_trees_are_degenerate() {
        let train = gen_kth_smallest(&TaskConfig::kth(6, 1, 20, 30, 1), 0).unwrap();
        let test = gen_kth_smallest(&TaskConfig::kth(6, 1, 20, 10, 1), 1).unwrap();
        let ds = DataSplits {
            train: &train,
            test: &test,
        };
        let (a, b) = (oracle_traces(&train, true), oracle_traces(&test, true));
        let t = TraceSplits {
            train: &a,
            test: &b,
        };
        let s = probe_height(t, t, ds, &ProbeConfig::default()).unwrap();
        assert_eq!(s.raw_f1, 1.0);
        assert_eq!(s.normalized, None);
    }

    #[test]
    fn instance_shapes_and_mismatch() {
        let ds = gen_kth_smallest(&TaskConfig::kth(6, 2, 20, 3, 1), 0).unwrap();
        let tr = oracle_traces(&ds, true);
        let inst = build_instances(&tr, &ds, None).unwrap();
        assert_eq!(inst.len(), 18);
        assert!(inst
            .iter()
            .all(|i| i.features.len() == 2 && i.height.is_some() == i.useful));
        assert_eq!(
            build_instances(&tr, &ds, Some(1)).unwrap()[0]
                .features
                .len(),
            1
        );
        assert!(build_instances(&tr, &ds, Some(3)).is_err());
        let mut swapped = tr.clone();
        swapped.swap(0, 1);
        assert!(matches!(
            build_instances(&swapped, &ds, None),
            Err(Error::Data(_))
        ));
    }
}
