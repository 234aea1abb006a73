// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use mechprobe_core::taskgen::{Example, Label, TaskKind, Vocab};
use mechprobe_core::toylm::{Model, ModelConfig, PruneMask, Workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// F1-macro from a full confusion matrix, averaged over the gold classes.
pub fn f1_oracle(gold: &[u32], pred: &[u32]) -> f64 {
    let mut m: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gold.iter().zip(pred) {
        *m.entry((g, p)).or_default() += 1;
    }
    let classes: BTreeSet<u32> = gold.iter().copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let tp = *m.get(&(c, c)).unwrap_or(&0) as f64;
        let predicted: usize = m.iter().filter(|((_, p), _)| *p == c).map(|(_, n)| n).sum();
        let actual: usize = m.iter().filter(|((g, _), _)| *g == c).map(|(_, n)| n).sum();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        total += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    total / classes.len() as f64
}

/// Shannon entropy in nats, as the log of a product of powers.
pub fn entropy_oracle(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (1.0 / x).ln())
        .sum()
}

/// Pearson correlation from raw power sums.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn random_distribution(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|_| {
            if r.random_bool(0.15) {
                0.0
            } else {
                r.random::<f64>()
            }
        })
        .collect();
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        let mut u = vec![0.0; n];
        u[0] = 1.0;
        return u;
    }
    w.iter().map(|v| v / s).collect()
}

/// Stack of `l` causal row-stochastic `t x t` matrices.
pub fn random_causal_stack(r: &mut ChaCha8Rng, t: usize, l: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|_| {
            let mut m = vec![0.0; t * t];
            for i in 0..t {
                let w: Vec<f64> = (0..=i)
                    .map(|_| (2.0 * r.random::<f64>() - 1.0).exp() * 0.5 + 0.01)
                    .collect();
                let s: f64 = w.iter().sum();
                for (j, v) in w.iter().enumerate() {
                    m[i * t + j] = v / s;
                }
            }
            m
        })
        .collect()
}

/// Checks a k-th smallest example against a plain sort.
pub fn check_kth(ex: &Example, m: u32, k: u32, vocab: &Vocab) -> Result<(), String> {
    if ex.task != TaskKind::KthSmallest || ex.k != Some(k) {
        return Err("wrong task tag or k".into());
    }
    if ex.tokens.len() != m as usize + 1 || *ex.tokens.last().unwrap() != vocab.qry() {
        return Err("expected m numbers followed by the query marker".into());
    }
    let nums = &ex.tokens[..m as usize];
    if nums.iter().any(|&x| x >= vocab.content) {
        return Err("number outside the content range".into());
    }
    let mut sorted = nums.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != nums.len() {
        return Err("numbers repeat".into());
    }
    if ex.answer != sorted[k as usize - 1] {
        return Err(format!(
            "answer {} but the k-th smallest is {}",
            ex.answer,
            sorted[k as usize - 1]
        ));
    }
    if ex.statement_spans != (0..m).map(|i| (i, i + 1)).collect::<Vec<_>>() {
        return Err("statement spans are not one per number".into());
    }
    let positions: Vec<u32> = sorted[..k as usize]
        .iter()
        .map(|v| nums.iter().position(|x| x == v).unwrap() as u32)
        .collect();
    if ex.tree.node_indices != positions {
        return Err("tree nodes are not the k smallest in ascending order".into());
    }
    let mut heights = vec![0; k as usize];
    if k > 1 {
        heights[k as usize - 1] = 1;
    }
    if ex.tree.heights != heights {
        return Err("tree heights wrong".into());
    }
    Ok(())
}

type Fact = (u32, u32, bool);

fn parse_chain(ex: &Example, vocab: &Vocab) -> Result<(Vec<[u32; 4]>, u32, u32), String> {
    let n = ex.statement_spans.len();
    if ex.tokens.len() != 4 * n + 3 {
        return Err("chain inputs are 4 tokens per statement plus a 3-token question".into());
    }
    let stmts: Vec<[u32; 4]> = ex.tokens[..4 * n]
        .chunks(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    for (i, s) in stmts.iter().enumerate() {
        if ex.statement_spans[i] != (4 * i as u32, 4 * i as u32 + 4) {
            return Err("statement span misplaced".into());
        }
        if s[1] != vocab.content + 1 && s[1] != vocab.content + 2 {
            return Err("relation token missing".into());
        }
        if s[3] != vocab.content + 4 && s[3] != vocab.content + 5 {
            return Err("polarity token missing".into());
        }
    }
    let q = &ex.tokens[4 * n..];
    if q[1] != vocab.content + 3 || ex.question_span != Some((4 * n as u32, 4 * n as u32 + 3)) {
        return Err("question malformed".into());
    }
    Ok((stmts, q[0], q[2]))
}

/// Forward chaining over raw token quadruples; `None` when undetermined or contradictory.
pub fn forward_chain(
    stmts: &[[u32; 4]],
    vocab: &Vocab,
    entity: u32,
    attribute: u32,
) -> Option<bool> {
    let has = vocab.content + 1;
    let pos = vocab.content + 4;
    let mut known: HashSet<Fact> = stmts
        .iter()
        .filter(|s| s[1] == has)
        .map(|s| (s[0], s[2], s[3] == pos))
        .collect();
    let rules: Vec<(u32, u32, bool)> = stmts
        .iter()
        .filter(|s| s[1] != has)
        .map(|s| (s[0], s[2], s[3] == pos))
        .collect();
    loop {
        let mut grew = false;
        let snapshot: Vec<Fact> = known.iter().copied().collect();
        for (e, a, p) in snapshot {
            if !p {
                continue;
            }
            for &(pre, con, pol) in &rules {
                if pre == a && known.insert((e, con, pol)) {
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    match (
        known.contains(&(entity, attribute, true)),
        known.contains(&(entity, attribute, false)),
    ) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// Checks a chain-proof example: the label follows, the tree is a proof, and no tree node is redundant.
pub fn check_chain(ex: &Example, vocab: &Vocab, depth: u32) -> Result<(), String> {
    let (stmts, entity, attribute) = parse_chain(ex, vocab)?;
    let derived = forward_chain(&stmts, vocab, entity, attribute).ok_or("label not derivable")?;
    let label = ex.label.ok_or("missing label")?;
    if derived != (label == Label::True) {
        return Err("derived label disagrees".into());
    }
    let answer = if derived {
        vocab.content + 6
    } else {
        vocab.content + 7
    };
    if ex.answer != answer {
        return Err("answer token disagrees with label".into());
    }
    if ex.tree.node_indices.len() != depth as usize + 1 || ex.tree.depth() != depth {
        return Err("tree size does not match depth".into());
    }
    let proof: Vec<[u32; 4]> = ex
        .tree
        .node_indices
        .iter()
        .map(|&i| stmts[i as usize])
        .collect();
    if forward_chain(&proof, vocab, entity, attribute) != Some(derived) {
        return Err("tree alone does not prove the label".into());
    }
    for &drop in &ex.tree.node_indices {
        let rest: Vec<[u32; 4]> = stmts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as u32 != drop)
            .map(|(_, s)| *s)
            .collect();
        if forward_chain(&rest, vocab, entity, attribute).is_some() {
            return Err(format!("label still follows without tree node {drop}"));
        }
    }
    Ok(())
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_check(
    cfg: ModelConfig,
    tokens: &[u32],
    target: u32,
    mask: &PruneMask,
    step: f64,
) -> f64 {
    let mut model = Model::<f64>::init_random(cfg).unwrap();
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        *p += 0.05 * ((i as f64 * 0.618).fract() - 0.5);
    }
    let mut ws = Workspace::new();
    let mut grad = vec![0.0; model.layout().total];
    model
        .loss_and_grad(tokens, target, mask, &mut ws, &mut grad)
        .unwrap();
    let mut worst = 0.0f64;
    for i in 0..model.layout().total {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + step;
        let up = model.loss(tokens, target, mask).unwrap();
        model.params_mut()[i] = orig - step;
        let down = model.loss(tokens, target, mask).unwrap();
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max((grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6));
    }
    worst
}
