//! Precision, recall and F1 over entries, boundaries and path sets, with
//! micro/macro aggregation and tabular output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::Offset;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Score { tp, fp, fn_, precision, recall, f1: harmonic(precision, recall) }
    }

    /// The score of a contract the tool failed on: every truth item missed.
    pub fn failure(truth_items: usize) -> Self {
        Score { tp: 0, fp: 0, fn_: truth_items, precision: 0.0, recall: 0.0, f1: 0.0 }
    }
}

pub fn set_score<T: Ord>(predicted: &BTreeSet<T>, truth: &BTreeSet<T>) -> Score {
    let tp = predicted.intersection(truth).count();
    Score::from_counts(tp, predicted.len() - tp, truth.len() - tp)
}

pub fn entry_score(predicted: &BTreeSet<Offset>, truth: &BTreeSet<Offset>) -> Score {
    set_score(predicted, truth)
}

/// A function as `(entry, bytes)`.
pub type Boundary = (Offset, BTreeSet<Offset>);

/// Exact matching on entry and byte set.
pub fn boundary_score(predicted: &[Boundary], truth: &[Boundary]) -> Score {
    let p: BTreeSet<&Boundary> = predicted.iter().collect();
    let t: BTreeSet<&Boundary> = truth.iter().collect();
    set_score(&p, &t)
}

/// Exact matching on byte sets alone, as a multiset.
pub fn boundary_bytes_score(predicted: &[Boundary], truth: &[Boundary]) -> Score {
    let mut pool: BTreeMap<&BTreeSet<Offset>, usize> = BTreeMap::new();
    for (_, b) in truth {
        *pool.entry(b).or_default() += 1;
    }
    let mut tp = 0;
    for (_, b) in predicted {
        if let Some(n) = pool.get_mut(b).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    Score::from_counts(tp, predicted.len() - tp, truth.len() - tp)
}

pub fn pathset_score(predicted: &BTreeSet<Vec<Offset>>, truth: &BTreeSet<Vec<Offset>>) -> Score {
    set_score(predicted, truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Micro,
    Macro,
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            _ => Err(format!("unknown aggregation {s:?} (micro|macro)")),
        }
    }
}

/// Micro sums the counts; macro averages per-contract rates. Counts are
/// summed in both modes. `None` for an empty list.
pub fn aggregate(scores: &[Score], mode: Aggregation) -> Option<Score> {
    if scores.is_empty() {
        return None;
    }
    let (tp, fp, fn_) = scores.iter().fold((0, 0, 0), |a, s| (a.0 + s.tp, a.1 + s.fp, a.2 + s.fn_));
    Some(match mode {
        Aggregation::Micro => Score::from_counts(tp, fp, fn_),
        Aggregation::Macro => {
            let n = scores.len() as f64;
            Score {
                tp,
                fp,
                fn_,
                precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
                recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
                f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
            }
        }
    })
}

/// Aligned P/R/F1 table, one row per named score.
pub fn table(rows: &[(&str, Score)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}  {:>7} {:>7} {:>7}  {:>7} {:>7} {:>7}\n", "metric", "P", "R", "F1", "TP", "FP", "FN");
    for (name, sc) in rows {
        let _ = writeln!(
            s,
            "{name:<w$}  {:>7.4} {:>7.4} {:>7.4}  {:>7} {:>7} {:>7}",
            sc.precision, sc.recall, sc.f1, sc.tp, sc.fp, sc.fn_
        );
    }
    s
}
