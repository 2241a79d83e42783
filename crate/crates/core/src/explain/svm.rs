//! One-vs-rest linear SVMs on embeddings.
//!
//! Each class minimizes `lambda |w|^2 + mean(max(0, 1 - y (w.x + b)))` with
//! `y` in {-1, +1}. Per epoch: one shuffled pass of Pegasos updates on `w`
//! (step `1 / (2 lambda t)`, the `1/(lambda t)` schedule for the gradient
//! `2 lambda w`), then an exact minimization over the unregularized bias. An
//! epoch whose end objective is higher than the previous one is rolled back,
//! so the recorded objective never increases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{LabelVector, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SvmError {
    #[error("{samples} samples but {labels} label vectors")]
    Length { samples: usize, labels: usize },
    #[error("sample {index} has dimension {found}, expected {expected}")]
    Dim {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("no training samples")]
    Empty,
    #[error("lambda must be positive and finite, got {0}")]
    Lambda(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// False when the class lacked positives or negatives; the model then
    /// predicts the only label it saw.
    pub trained: bool,
    /// Objective at the end of each epoch.
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub dim: usize,
    pub params: SvmParams,
    pub classes: Vec<ClassSvm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmPrediction {
    pub scores: [f64; NUM_CLASSES],
    /// `score > 0` per slot. May violate label invariants (e.g. none set);
    /// it is a raw decision, not a [`LabelVector`].
    pub labels: [bool; NUM_CLASSES],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    lambda * dot(w, w) + hinge / xs.len() as f64
}

/// Exact minimizer of `mean(max(0, 1 - y (s + b)))` over `b`. The function is
/// convex piecewise-linear with kinks at `y - s`; the first kink with a
/// non-negative right slope is optimal, and a flat optimal segment resolves
/// to its midpoint.
fn best_bias(scores: &[f64], ys: &[f64]) -> f64 {
    let mut kinks: Vec<f64> = scores.iter().zip(ys).map(|(s, y)| y - s).collect();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    // right derivative at c: -#pos(kink > c) + #neg(kink <= c)
    let slope = |c: f64| -> i64 {
        let mut d = 0i64;
        for (s, &y) in scores.iter().zip(ys) {
            let k = y - s;
            if y > 0.0 && k > c {
                d -= 1;
            } else if y < 0.0 && k <= c {
                d += 1;
            }
        }
        d
    };
    let (mut lo, mut hi) = (0usize, kinks.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if slope(kinks[mid]) >= 0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let c = kinks[lo];
    if slope(c) == 0 && lo + 1 < kinks.len() {
        0.5 * (c + kinks[lo + 1])
    } else {
        c
    }
}

fn fit_class(xs: &[Vec<f64>], ys: &[f64], params: &SvmParams, seed: u64) -> ClassSvm {
    let dim = xs[0].len();
    let lambda = params.lambda;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut w = vec![0.0; dim];
    let scores0 = vec![0.0; xs.len()];
    let mut b = best_bias(&scores0, ys);
    let mut best_obj = objective(&w, b, xs, ys, lambda);
    let mut history = Vec::with_capacity(params.epochs);
    let mut t = 0u64;
    for _ in 0..params.epochs {
        let (mut w_new, mut b_new) = (w.clone(), b);
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (2.0 * lambda * t as f64);
            let margin = ys[i] * (dot(&w_new, &xs[i]) + b_new);
            let shrink = 1.0 - 2.0 * lambda * eta;
            w_new.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (v, x) in w_new.iter_mut().zip(&xs[i]) {
                    *v += eta * ys[i] * x;
                }
            }
        }
        let scores: Vec<f64> = xs.iter().map(|x| dot(&w_new, x)).collect();
        b_new = best_bias(&scores, ys);
        let obj = objective(&w_new, b_new, xs, ys, lambda);
        if obj <= best_obj {
            w = w_new;
            b = b_new;
            best_obj = obj;
        }
        history.push(best_obj);
    }
    ClassSvm {
        weights: w,
        bias: b,
        trained: true,
        objective: history,
    }
}

/// Fits one SVM per label slot. Slots without both positives and negatives
/// are skipped with a warning.
pub fn fit_svm(
    xs: &[Vec<f64>],
    labels: &[LabelVector],
    params: &SvmParams,
) -> Result<SvmModel, SvmError> {
    if xs.len() != labels.len() {
        return Err(SvmError::Length {
            samples: xs.len(),
            labels: labels.len(),
        });
    }
    if xs.is_empty() {
        return Err(SvmError::Empty);
    }
    if !(params.lambda > 0.0 && params.lambda.is_finite()) {
        return Err(SvmError::Lambda(params.lambda));
    }
    let dim = xs[0].len();
    if let Some((index, x)) = xs.iter().enumerate().find(|(_, x)| x.len() != dim) {
        return Err(SvmError::Dim {
            index,
            expected: dim,
            found: x.len(),
        });
    }
    let classes = (0..NUM_CLASSES)
        .map(|c| {
            let ys: Vec<f64> = labels
                .iter()
                .map(|l| if l.bits()[c] { 1.0 } else { -1.0 })
                .collect();
            let pos = ys.iter().filter(|&&y| y > 0.0).count();
            if pos == 0 || pos == ys.len() {
                tracing::warn!(
                    class = c,
                    positives = pos,
                    total = ys.len(),
                    "skipping SVM class without both labels"
                );
                return ClassSvm {
                    weights: vec![0.0; dim],
                    bias: if pos == 0 { -1.0 } else { 1.0 },
                    trained: false,
                    objective: Vec::new(),
                };
            }
            fit_class(xs, &ys, params, params.seed.wrapping_add(c as u64))
        })
        .collect();
    Ok(SvmModel {
        dim,
        params: *params,
        classes,
    })
}

impl SvmModel {
    pub fn svm_predict(&self, x: &[f64]) -> Result<SvmPrediction, SvmError> {
        if x.len() != self.dim {
            return Err(SvmError::Dim {
                index: 0,
                expected: self.dim,
                found: x.len(),
            });
        }
        let mut scores = [0.0; NUM_CLASSES];
        let mut labels = [false; NUM_CLASSES];
        for (c, cls) in self.classes.iter().enumerate() {
            scores[c] = dot(&cls.weights, x) + cls.bias;
            labels[c] = scores[c] > 0.0;
        }
        Ok(SvmPrediction { scores, labels })
    }
}
