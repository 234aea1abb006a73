// SPDX-License-Identifier: MIT OR Apache-2.0

use mechprobe_core::analysis::pearson;
use mechprobe_core::flow::{check_domination_bound, information_ratio_first, rollout};
use mechprobe_core::heads::entropy;
use mechprobe_core::probe::{f1_macro, normalize_score, Knn};
use mechprobe_core::taskgen::{annotate_tree_kth, corrupt_useless, generate, TaskConfig};
use proptest::prelude::*;

fn distribution(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..max_len).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|v| v / s).collect())
    })
}

fn causal_stack() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (1usize..8, 1usize..6).prop_flat_map(|(t, l)| {
        let layer = prop::collection::vec(0.01f64..1.0, t * t).prop_map(move |w| {
            let mut m = vec![0.0; t * t];
            for i in 0..t {
                let s: f64 = w[i * t..=i * t + i].iter().sum();
                for j in 0..=i {
                    m[i * t + j] = w[i * t + j] / s;
                }
            }
            m
        });
        (Just(t), prop::collection::vec(layer, l))
    })
}

proptest! {
    #[test]
    fn entropy_is_permutation_invariant_and_at_most_log_n(p in distribution(24), shift in 0usize..24) {
        let h = entropy(&p).unwrap();
        let mut q = p.clone();
        q.rotate_left(shift % p.len());
        q.reverse();
        prop_assert!((entropy(&q).unwrap() - h).abs() < 1e-12);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn uniform_entropy_is_log_n(n in 1usize..64) {
        let p = vec![1.0 / n as f64; n];
        prop_assert!((entropy(&p).unwrap() - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rollout_satisfies_domination_bound((t, layers) in causal_stack()) {
        let state = rollout(&layers, t).unwrap();
        let report = check_domination_bound(&state);
        prop_assert!(report.holds, "margin {}", report.margin);
        for row in information_ratio_first(&state) {
            for v in row {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
        for m in &state.accum {
            for i in 0..t {
                let s: f64 = m[i * t..(i + 1) * t].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn f1_is_bounded_and_perfect_on_itself(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..80)
    ) {
        let (gold, pred): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let f = f1_macro(&gold, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f1_macro(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn normalization_is_monotone_with_fixed_points(rand in 0.0f64..0.99, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assert_eq!(normalize_score(1.0, rand).unwrap(), 1.0);
        prop_assert_eq!(normalize_score(rand, rand).unwrap(), 0.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(normalize_score(lo, rand).unwrap() <= normalize_score(hi, rand).unwrap());
    }

    #[test]
    fn pearson_is_affine_invariant(
        xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
        scale in 0.1f64..10.0,
        shift in -100.0f64..100.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Ok(r) = pearson(&x, &y) {
            let x2: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
            let flipped: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((pearson(&x2, &y).unwrap() - r).abs() < 1e-9);
            prop_assert!((pearson(&x, &flipped).unwrap() + r).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn knn_ignores_training_order(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0u32..3), 5..40),
        queries in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let points: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let labels: Vec<u32> = pts.iter().map(|p| p.2).collect();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by_key(|&i| (i as u64).wrapping_mul(seed | 1).rotate_left(17));
        let shuffled_points: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
        let shuffled_labels: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
        let q: Vec<Vec<f64>> = queries.iter().map(|p| vec![p.0, p.1]).collect();
        let a = Knn::fit(&points, &labels, k).unwrap().predict(&q).unwrap();
        let b = Knn::fit(&shuffled_points, &shuffled_labels, k).unwrap().predict(&q).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kth_tree_orders_the_k_smallest(nums in prop::collection::hash_set(0u32..100, 2..12), k_frac in 0.0f64..1.0) {
        let nums: Vec<u32> = nums.into_iter().collect();
        let k = 1 + (k_frac * (nums.len() - 1) as f64) as u32;
        let tree = annotate_tree_kth(&nums, k).unwrap();
        let picked: Vec<u32> = tree.node_indices.iter().map(|&i| nums[i as usize]).collect();
        let mut sorted = nums.clone();
        sorted.sort();
        prop_assert_eq!(&picked[..], &sorted[..k as usize]);
    }

    #[test]
    fn generation_is_deterministic_per_seed(seed in any::<u64>(), split in 0u64..4) {
        let cfg = TaskConfig::chain(5, 1, 48, 20, seed);
        let a = generate(&cfg, split).unwrap();
        prop_assert_eq!(&a, &generate(&cfg, split).unwrap());
        for ex in a.iter() {
            let c = corrupt_useless(ex, &cfg.vocab(), seed).unwrap();
            prop_assert_eq!(c.answer, ex.answer);
            prop_assert_eq!(&c.tree, &ex.tree);
        }
    }
}
