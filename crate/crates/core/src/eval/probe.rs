//! Multinomial logistic regression on frozen features.

use serde::{Deserialize, Serialize};

use super::knn::accuracy;
use super::FeatureSet;
use crate::autodiff::softmax_in_place;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_iters: usize,
    /// Step as a fraction of `1 / L`, with `L` the smoothness bound of the
    /// training objective.
    pub step_size: f64,
    /// L2 penalty on the weights (not the biases).
    pub l2: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            step_size: 1.0,
            l2: 1e-4,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Mean per-class F1 over the classes present in the test labels.
    pub macro_f1: f64,
    pub predictions: Vec<usize>,
    pub iterations: usize,
}

/// Fitted classifier: features are standardized with training statistics,
/// then mapped linearly to class logits.
struct Classifier {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `(D + 1) x C`, last row is the bias.
    weights: Vec<Vec<f64>>,
}

impl Classifier {
    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let mut out = self.weights[d].clone();
        for (x, w) in z.iter().zip(&self.weights) {
            for (o, wc) in out.iter_mut().zip(w) {
                *o += x * wc;
            }
        }
        out
    }

    fn predict(&self, row: &[f64]) -> usize {
        let logits = self.logits(&self.standardize(row));
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        best
    }
}

fn fit(train: &FeatureSet, num_classes: usize, cfg: &ProbeConfig) -> (Classifier, usize) {
    let (m, d) = train.features.shape();
    let mut mean = vec![0.0; d];
    for row in train.features.iter_rows() {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x / m as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in train.features.iter_rows() {
        for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - mu) * (x - mu) / m as f64;
        }
    }
    let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let mut clf = Classifier {
        mean,
        inv_std,
        weights: vec![vec![0.0; num_classes]; d + 1],
    };
    let z: Vec<Vec<f64>> = train.features.iter_rows().map(|r| clf.standardize(r)).collect();

    let step = cfg.step_size / (0.5 * top_eigenvalue(&z) + cfg.l2);

    // Nesterov-accelerated full-batch gradient descent
    let mut velocity = vec![vec![0.0; num_classes]; d + 1];
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let momentum = it as f64 / (it as f64 + 3.0);
        let lookahead = Classifier {
            mean: Vec::new(),
            inv_std: Vec::new(),
            weights: clf
                .weights
                .iter()
                .zip(&velocity)
                .map(|(w, v)| w.iter().zip(v).map(|(a, b)| a + momentum * b).collect())
                .collect(),
        };
        let mut grad = vec![vec![0.0; num_classes]; d + 1];
        for (zi, &y) in z.iter().zip(&train.labels) {
            let mut p = lookahead.logits(zi);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (g, x) in grad.iter_mut().zip(zi.iter().chain(std::iter::once(&1.0))) {
                for (gc, pc) in g.iter_mut().zip(&p) {
                    *gc += x * pc / m as f64;
                }
            }
        }
        for (g, w) in grad.iter_mut().zip(&lookahead.weights).take(d) {
            for (gc, wc) in g.iter_mut().zip(w) {
                *gc += cfg.l2 * wc;
            }
        }
        let gnorm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        for ((v, g), w) in velocity.iter_mut().zip(&grad).zip(clf.weights.iter_mut()) {
            for ((vc, gc), wc) in v.iter_mut().zip(g).zip(w.iter_mut()) {
                *vc = momentum * *vc - step * gc;
                *wc += *vc;
            }
        }
        if gnorm < cfg.tolerance {
            break;
        }
    }
    (clf, iterations)
}

/// Largest eigenvalue of the second-moment matrix of `[z, 1]`, by power
/// iteration.
fn top_eigenvalue(z: &[Vec<f64>]) -> f64 {
    let d = z.first().map_or(0, Vec::len) + 1;
    let m = z.len().max(1) as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for row in z {
            let proj = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for (n, x) in next.iter_mut().zip(row.iter().chain(std::iter::once(&1.0))) {
                *n += proj * x / m;
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Mean F1 over the classes that occur in `labels`.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let num_classes = labels.iter().chain(preds).max().map_or(0, |m| m + 1);
    let mut present = vec![false; num_classes];
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        present[l] = true;
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let scores: Vec<f64> = (0..num_classes)
        .filter(|&c| present[c])
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                200.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Train on `train`, report accuracy and macro F1 on `test`. Every class that
/// occurs in `test` must occur in `train`.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() {
        return Err(Error::Empty("probe training set"));
    }
    if train.features.cols() != test.features.cols() {
        return Err(Error::DimensionMismatch {
            expected: train.features.cols(),
            got: test.features.cols(),
        });
    }
    let num_classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    let mut seen = vec![false; num_classes];
    for &l in &train.labels {
        seen[l] = true;
    }
    if let Some(missing) = test.labels.iter().find(|&&l| !seen[l]) {
        return Err(Error::config("eval.probe", format!("class {missing} has no training example")));
    }
    let (clf, iterations) = fit(train, num_classes, cfg);
    let predictions: Vec<usize> = test.features.iter_rows().map(|r| clf.predict(r)).collect();
    Ok(ProbeResult {
        accuracy: accuracy(&predictions, &test.labels),
        macro_f1: macro_f1(&predictions, &test.labels),
        predictions,
        iterations,
    })
}
