// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{Dataset, Example, Label};
use crate::error::{bail, Result};
use crate::rng;

/// Partition `ds` into (train, dev, test) by `ratios`.
///
/// The assignment is a seeded shuffle. Labelled datasets are interleaved by
/// label after shuffling so every split stays balanced to within one
/// example. Each split is returned sorted by id.
pub fn split(
    ds: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        bail!(
            Config,
            "split ratios must be in [0, 1] and sum to 1, got ({a}, {b}, {c})"
        );
    }
    let n = ds.len();
    let n_train = libm::round(n as f64 * a) as usize;
    let n_dev = (libm::round(n as f64 * b) as usize).min(n - n_train);
    let n_test = n - n_train - n_dev;
    for (name, r, count) in [
        ("train", a, n_train),
        ("dev", b, n_dev),
        ("test", c, n_test),
    ] {
        if r > 0.0 && count == 0 {
            bail!(
                Config,
                "{name} split is empty for {n} examples at ratio {r}"
            );
        }
    }

    let mut order: Vec<&Example> = ds.examples.iter().collect();
    order.sort_by_key(|e| e.id);
    order.shuffle(&mut rng::stream(seed, &[0x5917]));
    if order.iter().any(|e| e.label.is_some()) {
        order = interleave_labels(order);
    }

    let take = |range: core::ops::Range<usize>| {
        let mut part: Vec<Example> = order[range].iter().map(|&e| e.clone()).collect();
        part.sort_by_key(|e| e.id);
        Dataset::new(part)
    };
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_dev),
        take(n_train + n_dev..n),
    ))
}

fn interleave_labels(order: Vec<&Example>) -> Vec<&Example> {
    let (mut yes, mut rest): (Vec<&Example>, Vec<&Example>) = order
        .into_iter()
        .partition(|e| e.label == Some(Label::True));
    let mut out = Vec::with_capacity(yes.len() + rest.len());
    yes.reverse();
    rest.reverse();
    loop {
        match (yes.pop(), rest.pop()) {
            (None, None) => break,
            (y, r) => out.extend(y.into_iter().chain(r)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_chain_proof, gen_kth_smallest, TaskConfig};

    #[test]
    fn eighty_ten_ten() {
        let ds = gen_kth_smallest(&TaskConfig::kth(4, 1, 16, 10, 0), 0).unwrap();
        let (tr, dv, te) = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (8, 1, 1));
        let mut ids: Vec<u64> = tr
            .iter()
            .chain(dv.iter())
            .chain(te.iter())
            .map(|e| e.id)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert_eq!(split(&ds, (0.8, 0.1, 0.1), 3).unwrap(), (tr, dv, te));
    }

    #[test]
    fn all_train() {
        let ds = gen_kth_smallest(&TaskConfig::kth(4, 1, 16, 10, 0), 0).unwrap();
        let (tr, dv, te) = split(&ds, (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (10, 0, 0));
    }

    #[test]
    fn empty_split_and_bad_ratios() {
        let ds = gen_kth_smallest(&TaskConfig::kth(4, 1, 16, 3, 0), 0).unwrap();
        assert!(matches!(
            split(&ds, (0.8, 0.1, 0.1), 0),
            Err(crate::Error::Config(_))
        ));
        assert!(matches!(
            split(&ds, (0.5, 0.1, 0.1), 0),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn labelled_splits_stay_balanced() {
        let ds = gen_chain_proof(&TaskConfig::chain(4, 1, 32, 200, 0), 0).unwrap();
        let (tr, dv, te) = split(&ds, (0.7, 0.15, 0.15), 11).unwrap();
        for part in [&tr, &dv, &te] {
            let t = part.iter().filter(|e| e.label == Some(Label::True)).count() as i64;
            assert!(
                (2 * t - part.len() as i64).abs() <= 1,
                "{t} of {}",
                part.len()
            );
        }
    }
}
