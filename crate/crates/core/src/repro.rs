// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recomputation of the published GPT-2 normalized probing scores from the
//! published raw F1-macro scores.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::probe::normalize_score;

/// Raw F1-macro scores (percent) for one chain depth `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawF1Row {
    pub k: u32,
    pub v_random: f64,
    pub v_pretrained: f64,
    pub v_finetuned: f64,
    pub g_random: f64,
    pub g_pretrained: f64,
    pub g_finetuned: f64,
}

const fn raw(k: u32, v: [f64; 3], g: [f64; 3]) -> RawF1Row {
    RawF1Row {
        k,
        v_random: v[0],
        v_pretrained: v[1],
        v_finetuned: v[2],
        g_random: g[0],
        g_pretrained: g[1],
        g_finetuned: g[2],
    }
}

pub const GPT2_RAW_F1: [RawF1Row; 8] = [
    raw(1, [48.38, 52.04, 96.36], [100.0, 100.0, 100.0]),
    raw(2, [48.60, 51.61, 96.77], [73.18, 78.72, 99.47]),
    raw(3, [47.62, 54.68, 95.61], [61.45, 66.69, 98.36]),
    raw(4, [47.42, 58.32, 93.87], [55.71, 59.28, 96.69]),
    raw(5, [48.50, 60.94, 93.58], [54.86, 55.48, 94.66]),
    raw(6, [48.66, 61.40, 93.27], [50.44, 55.98, 97.55]),
    raw(7, [49.28, 62.40, 88.14], [51.75, 51.11, 97.55]),
    raw(8, [49.74, 60.95, 89.31], [50.54, 51.07, 97.00]),
];

/// A cell of the published normalized table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Printed {
    Blank,
    Value(f64),
    /// Printed as `< x`.
    Below(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    P1,
    P2,
}

/// Published (S_P1 pretrained, S_P1 finetuned, S_P2 pretrained, S_P2 finetuned) per `k`.
pub const GPT2_PRINTED: [(u32, [Printed; 4]); 8] = {
    use Printed::{Below, Blank, Value as V};
    [
        (1, [V(7.09), V(92.94), Blank, Blank]),
        (2, [V(5.88), V(93.71), V(20.65), V(98.05)]),
        (3, [V(13.48), V(91.62), V(13.59), V(95.76)]),
        (4, [V(20.73), V(88.34), V(8.04), V(92.52)]),
        (5, [V(24.15), V(87.54), V(13.81), V(88.17)]),
        (6, [V(24.82), V(86.89), V(11.18), V(95.06)]),
        (7, [V(25.87), V(76.61), Below(1.0), V(91.56)]),
        (8, [V(22.30), V(78.73), V(1.06), V(93.93)]),
    ]
};

/// Cells whose printed value does not follow from the raw scores.
pub const KNOWN_MISMATCHES: [(Variant, Score, u32); 2] = [
    (Variant::Finetuned, Score::P2, 7),
    (Variant::Pretrained, Score::P2, 5),
];

/// Default agreement tolerance, in percentage points.
pub const TOLERANCE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Match,
    Mismatch,
    /// A listed inconsistency that indeed disagrees.
    KnownMismatch,
    /// A listed inconsistency that unexpectedly agrees.
    KnownButMatches,
    /// Undefined score, printed blank.
    Blank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReproCell {
    pub k: u32,
    pub variant: Variant,
    pub score: Score,
    /// Percent; `None` when the random baseline is 100.
    pub computed: Option<f64>,
    pub printed: Printed,
    pub delta: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproTable {
    pub tolerance: f64,
    pub cells: Vec<ReproCell>,
}

fn pct(model: f64, random: f64) -> Option<f64> {
    normalize_score(model / 100.0, random / 100.0)
        .ok()
        .map(|s| 100.0 * s)
}

fn judge(computed: Option<f64>, printed: Printed, tol: f64) -> (Option<f64>, bool) {
    match (computed, printed) {
        (None, Printed::Blank) => (None, true),
        (Some(c), Printed::Value(p)) => (Some(c - p), (c - p).abs() <= tol),
        (Some(c), Printed::Below(p)) => (None, c < p),
        _ => (None, false),
    }
}

/// Recompute every normalized cell and compare it with the published one.
pub fn repro_table(tolerance: f64) -> ReproTable {
    let mut cells = Vec::new();
    for (row, (k, printed)) in GPT2_RAW_F1.iter().zip(GPT2_PRINTED) {
        debug_assert_eq!(row.k, k);
        let computed = [
            (
                Variant::Pretrained,
                Score::P1,
                pct(row.v_pretrained, row.v_random),
            ),
            (
                Variant::Finetuned,
                Score::P1,
                pct(row.v_finetuned, row.v_random),
            ),
            (
                Variant::Pretrained,
                Score::P2,
                pct(row.g_pretrained, row.g_random),
            ),
            (
                Variant::Finetuned,
                Score::P2,
                pct(row.g_finetuned, row.g_random),
            ),
        ];
        for ((variant, score, value), printed) in computed.into_iter().zip(printed) {
            let (delta, agrees) = judge(value, printed, tolerance);
            let known = KNOWN_MISMATCHES.contains(&(variant, score, k));
            let status = match (agrees, known, printed) {
                (true, _, Printed::Blank) => CellStatus::Blank,
                (true, false, _) => CellStatus::Match,
                (false, false, _) => CellStatus::Mismatch,
                (false, true, _) => CellStatus::KnownMismatch,
                (true, true, _) => CellStatus::KnownButMatches,
            };
            cells.push(ReproCell {
                k,
                variant,
                score,
                computed: value,
                printed,
                delta,
                status,
            });
        }
    }
    ReproTable { tolerance, cells }
}

impl ReproTable {
    /// Every cell either agrees or is a listed inconsistency that disagrees.
    pub fn consistent(&self) -> bool {
        self.cells.iter().all(|c| {
            matches!(
                c.status,
                CellStatus::Match | CellStatus::Blank | CellStatus::KnownMismatch
            )
        })
    }

    pub fn cell(&self, k: u32, variant: Variant, score: Score) -> Option<&ReproCell> {
        self.cells
            .iter()
            .find(|c| c.k == k && c.variant == variant && c.score == score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_usefulness() {
        let t = repro_table(TOLERANCE);
        let c = t.cell(1, Variant::Finetuned, Score::P1).unwrap();
        let expect = 100.0 * (96.36 - 48.38) / (100.0 - 48.38);
        assert!((c.computed.unwrap() - expect).abs() < 1e-12);
        assert_eq!(c.status, CellStatus::Match);
        assert_eq!(
            t.cell(1, Variant::Finetuned, Score::P2).unwrap().status,
            CellStatus::Blank
        );
    }

    #[test]
    fn seven_is_flagged() {
        let t = repro_table(TOLERANCE);
        let c = t.cell(7, Variant::Finetuned, Score::P2).unwrap();
        assert_eq!(c.status, CellStatus::KnownMismatch);
        assert!((c.computed.unwrap() - 94.92).abs() < 0.01);
        assert_eq!(
            t.cell(7, Variant::Pretrained, Score::P2).unwrap().status,
            CellStatus::Match
        );
        assert!(t.consistent());
    }

    #[test]
    fn tight_tolerance_breaks_consistency() {
        assert!(!repro_table(0.001).consistent());
    }
}
