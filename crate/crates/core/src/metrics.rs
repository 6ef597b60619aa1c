//! Displacement errors, continual-learning summaries and classifier
//! diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, Result};
use crate::scenegen::Point;

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_horizons(preds: &[&[Point]], gt: &[Point]) -> Result<()> {
    if preds.is_empty() {
        return Err(DecodeError::invalid("no predicted components"));
    }
    if gt.is_empty() || preds.iter().any(|p| p.len() != gt.len()) {
        return Err(DecodeError::invalid("prediction horizon does not match ground truth"));
    }
    Ok(())
}

/// Minimum over components of the mean per-step Euclidean error.
pub fn min_ade(preds: &[&[Point]], gt: &[Point]) -> Result<f64> {
    check_horizons(preds, gt)?;
    Ok(preds
        .iter()
        .map(|p| p.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
        .fold(f64::INFINITY, f64::min))
}

/// Minimum over components of the final-step Euclidean error.
pub fn min_fde(preds: &[&[Point]], gt: &[Point]) -> Result<f64> {
    check_horizons(preds, gt)?;
    let end = gt[gt.len() - 1];
    Ok(preds
        .iter()
        .map(|p| dist(p[p.len() - 1], end))
        .fold(f64::INFINITY, f64::min))
}

/// Lower staircase `R[i][j]` for `j >= i`: `rows[i][j - i]` is domain `i`
/// evaluated after phase `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl ResultMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n - i {
                return Err(DecodeError::invalid(format!(
                    "staircase row {i} has {} entries, expected {}",
                    r.len(),
                    n - i
                )));
            }
            if r.iter().any(|v| !(*v >= 0.0)) {
                return Err(DecodeError::invalid(format!("staircase row {i} has a negative or NaN entry")));
            }
        }
        Ok(ResultMatrix { rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// `R[i][j]`, defined for `j >= i`.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        j.checked_sub(i).and_then(|k| self.rows.get(i)?.get(k).copied())
    }

    pub fn entries(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Mean of all staircase entries.
pub fn aer(r: &ResultMatrix) -> Result<f64> {
    let n = r.n();
    if n == 0 {
        return Err(DecodeError::invalid("empty result matrix"));
    }
    let total: f64 = r.rows.iter().flatten().sum();
    Ok(total / (n * (n + 1) / 2) as f64)
}

/// Mean increase of each domain's error after its own phase. Zero for a
/// single domain.
pub fn fgt(r: &ResultMatrix) -> Result<f64> {
    let n = r.n();
    if n == 0 {
        return Err(DecodeError::invalid("empty result matrix"));
    }
    if n == 1 {
        return Ok(0.0);
    }
    let total: f64 = r
        .rows
        .iter()
        .map(|row| row[1..].iter().map(|v| v - row[0]).sum::<f64>())
        .sum();
    Ok(total / (n * (n - 1) / 2) as f64)
}

const EXACT_AUROC_LIMIT: usize = 10_000;

/// Probability that a positive outranks a negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DecodeError::invalid("scores and labels differ in length"));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DecodeError::invalid("auroc needs both classes"));
    }
    if scores.len() <= EXACT_AUROC_LIMIT {
        Ok(auroc_pairs(&pos, &neg))
    } else {
        Ok(auroc_ranks(scores, labels, pos.len(), neg.len()))
    }
}

fn auroc_pairs(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn auroc_ranks(scores: &[f64], labels: &[bool], np: usize, nn: usize) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    (rank_sum - (np * (np + 1)) as f64 / 2.0) / (np * nn) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Class labels in matrix order.
    pub classes: Vec<u32>,
    /// `matrix[t][p]`: count with true class `t` predicted as `p`.
    pub matrix: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion matrix over the union of classes, sorted ascending.
/// Precision and recall are macro averages over classes, also for two.
pub fn confusion(selected: &[u32], truth: &[u32]) -> Result<Confusion> {
    if selected.len() != truth.len() {
        return Err(DecodeError::invalid(format!(
            "{} selections for {} labels",
            selected.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(DecodeError::invalid("empty confusion input"));
    }
    let mut classes: Vec<u32> = selected.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let at = |c: u32| classes.binary_search(&c).expect("known class");
    let mut matrix = vec![vec![0u64; k]; k];
    for (&p, &t) in selected.iter().zip(truth) {
        matrix[at(t)][at(p)] += 1;
    }
    Ok(from_matrix(classes, matrix))
}

/// Summary statistics for a given count matrix.
pub fn from_matrix(classes: Vec<u32>, matrix: Vec<Vec<u64>>) -> Confusion {
    let k = classes.len();
    let total: u64 = matrix.iter().flatten().sum();
    let correct: u64 = (0..k).map(|i| matrix[i][i]).sum();
    let prec = |c: usize| {
        let col: u64 = (0..k).map(|t| matrix[t][c]).sum();
        if col == 0 { 0.0 } else { matrix[c][c] as f64 / col as f64 }
    };
    let rec = |c: usize| {
        let row: u64 = matrix[c].iter().sum();
        if row == 0 { 0.0 } else { matrix[c][c] as f64 / row as f64 }
    };
    let precision = (0..k).map(prec).sum::<f64>() / k.max(1) as f64;
    let recall = (0..k).map(rec).sum::<f64>() / k.max(1) as f64;
    Confusion {
        classes,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        matrix,
        precision,
        recall,
    }
}

/// Staircase as CSV with header `domain,phase,value`.
pub fn staircase_csv(names: &[String], r: &ResultMatrix) -> String {
    let mut out = String::from("domain,phase,value\n");
    for (i, row) in r.rows.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            let _ = writeln!(out, "{name},{},{v}", i + k + 1);
        }
    }
    out
}

/// ROC points `(false positive rate, true positive rate)` sweeping the
/// threshold from high to low.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let np = labels.iter().filter(|l| **l).count().max(1) as f64;
    let nn = labels.iter().filter(|l| !**l).count().max(1) as f64;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push((fp / nn, tp / np));
    }
    out
}
