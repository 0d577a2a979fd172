//! Similarity-weighted nearest-neighbour classification.

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

fn unit_rows(set: &FeatureSet) -> Vec<Vec<f64>> {
    set.features
        .iter_rows()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 {
                r.to_vec()
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

/// Predicted class of every test row: the `k` most cosine-similar training
/// rows vote with weight equal to their similarity; ties go to the lowest
/// class index.
pub fn knn_predict(train: &FeatureSet, test: &FeatureSet, k: usize) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::Empty("k-NN training set"));
    }
    if k == 0 {
        return Err(Error::config("eval.knn_k", "must be >= 1"));
    }
    if train.features.cols() != test.features.cols() {
        return Err(Error::DimensionMismatch {
            expected: train.features.cols(),
            got: test.features.cols(),
        });
    }
    let num_classes = train.labels.iter().max().map_or(0, |m| m + 1);
    let train_rows = unit_rows(train);
    let test_rows = unit_rows(test);
    let k = k.min(train_rows.len());
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(train_rows.len());
    let mut preds = Vec::with_capacity(test_rows.len());
    for q in &test_rows {
        sims.clear();
        sims.extend(train_rows.iter().enumerate().map(|(i, r)| (dot(q, r), i)));
        // most similar first; equal similarities resolved by training index
        let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, by_sim);
        }
        let mut votes = vec![0.0; num_classes];
        for &(s, i) in &sims[..k] {
            votes[train.labels[i]] += s;
        }
        let mut best = 0;
        for c in 1..num_classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Top-1 accuracy in percent.
pub fn knn_classify(train: &FeatureSet, test: &FeatureSet, k: usize) -> Result<f64> {
    let preds = knn_predict(train, test, k)?;
    Ok(accuracy(&preds, &test.labels))
}

pub(crate) fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}
