// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};

use super::{Dataset, Example, ReasoningTree, TaskConfig, TaskKind};
use crate::error::{bail, Result};
use crate::rng;

/// Gold tree for "find the k-th smallest of `numbers`".
///
/// The nodes are the positions of the k smallest numbers, listed in ascending
/// value order. The position holding the k-th smallest is the root (height 1);
/// the other k-1 are leaves. For `k == 1` the lone node has height 0.
pub fn annotate_tree_kth(numbers: &[u32], k: u32) -> Result<ReasoningTree> {
    let k = k as usize;
    if k == 0 || k > numbers.len() {
        bail!(Input, "k={k} outside 1..={}", numbers.len());
    }
    let mut order: Vec<u32> = (0..numbers.len() as u32).collect();
    order.sort_unstable_by_key(|&i| numbers[i as usize]);
    if order
        .windows(2)
        .any(|w| numbers[w[0] as usize] == numbers[w[1] as usize])
    {
        bail!(Data, "numbers must be distinct");
    }
    order.truncate(k);
    let mut heights = alloc::vec![0u32; k];
    if k > 1 {
        heights[k - 1] = 1;
    }
    ReasoningTree::new(order, heights)
}

/// Generate `cfg.n_examples` k-th smallest examples.
///
/// Example `i` draws from its own stream seeded by `(cfg.seed, split_seed, i)`,
/// so the output is a pure function of the seeds.
pub fn gen_kth_smallest(cfg: &TaskConfig, split_seed: u64) -> Result<Dataset> {
    if cfg.task != TaskKind::KthSmallest {
        bail!(
            Config,
            "gen_kth_smallest called with a {:?} config",
            cfg.task
        );
    }
    cfg.validate()?;
    let vocab = cfg.vocab();
    let mut examples = Vec::with_capacity(cfg.n_examples as usize);
    for id in 0..cfg.n_examples {
        let mut rng = rng::stream(cfg.seed, &[split_seed, id]);
        let mut numbers: Vec<u32> =
            index::sample(&mut rng, cfg.vocab_size as usize, cfg.m as usize)
                .into_iter()
                .map(|x| x as u32)
                .collect();
        numbers.shuffle(&mut rng);
        let tree = annotate_tree_kth(&numbers, cfg.k)?;
        let answer = numbers[*tree.node_indices.last().unwrap() as usize];
        let statement_spans = (0..cfg.m).map(|i| (i, i + 1)).collect();
        let mut tokens = numbers;
        tokens.push(vocab.qry());
        examples.push(Example {
            id,
            task: TaskKind::KthSmallest,
            tokens,
            statement_spans,
            question_span: None,
            answer,
            tree,
            k: Some(cfg.k),
            label: None,
        });
    }
    Ok(Dataset::new(examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tree_for_second_smallest() {
        let t = annotate_tree_kth(&[5, 2, 9], 2).unwrap();
        assert_eq!(t.node_indices, vec![1, 0]);
        assert_eq!(t.heights, vec![0, 1]);
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn tree_for_minimum_is_depth_zero() {
        let t = annotate_tree_kth(&[5, 2, 9], 1).unwrap();
        assert_eq!(t.node_indices, vec![1]);
        assert_eq!(t.heights, vec![0]);
        assert_eq!(t.depth(), 0);
    }

    #[test]
    fn tree_root_for_pair() {
        let t = annotate_tree_kth(&[7, 3], 2).unwrap();
        assert_eq!(t.node_indices, vec![1, 0]);
        assert_eq!(t.height_of(0), Some(1));
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(
            annotate_tree_kth(&[4, 4, 1], 2),
            Err(crate::Error::Data(_))
        ));
    }

    #[test]
    fn generated_examples_are_valid_and_deterministic() {
        let cfg = TaskConfig::kth(8, 2, 64, 200, 42);
        let a = gen_kth_smallest(&cfg, 0).unwrap();
        let b = gen_kth_smallest(&cfg, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_kth_smallest(&cfg, 1).unwrap());
        for ex in a.iter() {
            ex.validate(&cfg.vocab()).unwrap();
            assert_eq!(ex.tokens.len(), 9);
            assert_eq!(*ex.tokens.last().unwrap(), cfg.vocab().qry());
        }
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let cfg = TaskConfig::kth(8, 9, 64, 1, 0);
        assert!(matches!(
            gen_kth_smallest(&cfg, 0),
            Err(crate::Error::Config(_))
        ));
    }
}
