//! Pooled (micro) metrics over flattened `N x K` probability/label arrays.
//! Labels are read as positive when `> 0.5`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0} predictions vs {1} labels")]
    Shape(usize, usize),
    #[error("AUC undefined: labels contain {positives} positives and {negatives} negatives")]
    Undefined { positives: usize, negatives: usize },
    #[error("mask value {0} is not binary")]
    NotBinary(f64),
}

fn check(probs: &[f64], labels: &[f64]) -> Result<(), MetricError> {
    if probs.len() != labels.len() {
        return Err(MetricError::Shape(probs.len(), labels.len()));
    }
    Ok(())
}

#[inline]
fn positive(label: f64) -> bool {
    label > 0.5
}

/// Fraction of slots where `(prob > threshold) == label`.
pub fn binary_accuracy(probs: &[f64], labels: &[f64], threshold: f64) -> Result<f64, MetricError> {
    check(probs, labels)?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > threshold) == positive(y))
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Micro ROC-AUC, `P(s+ > s-) + P(s+ = s-) / 2`, via the rank-sum statistic
/// with midranks for ties.
pub fn micro_auc(probs: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    check(probs, labels)?;
    let positives = labels.iter().filter(|&&y| positive(y)).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::Undefined {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // count of negatives strictly below, plus half the tied negatives
    let mut wins = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && probs[order[j]] == probs[order[i]] {
            j += 1;
        }
        let tied_pos = order[i..j].iter().filter(|&&k| positive(labels[k])).count();
        let tied_neg = (j - i) - tied_pos;
        wins += tied_pos as f64 * (neg_below as f64 + 0.5 * tied_neg as f64);
        neg_below += tied_neg;
        i = j;
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Set when either denominator was zero (the value is then 0).
    pub degenerate: bool,
}

pub fn precision_recall(
    probs: &[f64],
    labels: &[f64],
    threshold: f64,
) -> Result<PrecisionRecall, MetricError> {
    check(probs, labels)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p > threshold, positive(y)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        tp,
        fp,
        fn_,
        degenerate: tp + fp == 0 || tp + fn_ == 0,
    })
}

/// `2|A n B| / (|A| + |B|)` for 0/1 masks; two empty masks score 1.
pub fn dice(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        for v in [p, t] {
            if v != 0.0 && v != 1.0 {
                return Err(MetricError::NotBinary(v));
            }
        }
        let (p, t) = (p == 1.0, t == 1.0);
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Thresholds probabilities into a 0/1 mask (`p > threshold`).
pub fn threshold_mask(probs: &[f64], threshold: f64) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| if p > threshold { 1.0 } else { 0.0 })
        .collect()
}
