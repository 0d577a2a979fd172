//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use plstitch::eval::Segment;
use plstitch::net::params::Parameters;
use plstitch::train::{sample_gradients, Model, StepInput, TrainConfig};
use rand::Rng;

/// Levenshtein distance by the full `(n+1) x (m+1)` table.
pub fn naive_levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in table[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let substitute = table[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            table[i][j] = substitute.min(table[i - 1][j] + 1).min(table[i][j - 1] + 1);
        }
    }
    table[a.len()][b.len()]
}

pub fn reference_edit(pred: &[Segment], gt: &[Segment]) -> f64 {
    let a: Vec<usize> = pred.iter().map(|s| s.class).collect();
    let b: Vec<usize> = gt.iter().map(|s| s.class).collect();
    (1.0 - naive_levenshtein(&a, &b) as f64 / a.len().max(b.len()) as f64) * 100.0
}

/// IoU by counting frames covered by both and by either.
fn frame_iou(a: &Segment, b: &Segment) -> f64 {
    let end = a.end.max(b.end);
    let (mut both, mut either) = (0usize, 0usize);
    for t in 0..end {
        let in_a = a.start <= t && t < a.end;
        let in_b = b.start <= t && t < b.end;
        both += usize::from(in_a && in_b);
        either += usize::from(in_a || in_b);
    }
    both as f64 / either as f64
}

/// Predictions in temporal order each scan every unmatched same-class ground
/// truth segment and keep the first one of maximal IoU.
pub fn reference_f1(pred: &[Segment], gt: &[Segment], threshold: f64) -> f64 {
    let mut matched = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by_key(|&i| pred[i].start);
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if matched[j] || g.class != pred[i].class {
                continue;
            }
            let iou = frame_iou(&pred[i], g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou > threshold {
                matched[j] = true;
                tp += 1;
            }
        }
    }
    let precision = tp as f64 / pred.len() as f64;
    let recall = tp as f64 / gt.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        200.0 * precision * recall / (precision + recall)
    }
}

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_error: f64,
}

/// Compare the analytic gradient of the weighted total loss of `input` with
/// central differences at `probes` random scalar parameters.
pub fn check_pipeline_gradient<R: Rng>(
    model: &Model,
    params: &Parameters,
    input: &StepInput,
    cfg: &TrainConfig,
    probes: usize,
    rng: &mut R,
) -> GradCheck {
    let (_, grads) = sample_gradients(model, params, input, cfg).unwrap();
    let ids: Vec<_> = params.ids().collect();
    let h = 1e-5;
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    while checked < probes {
        let id = ids[rng.random_range(0..ids.len())];
        let n = params.get(id).len();
        let k = rng.random_range(0..n);
        let analytic = grads.get(id).data()[k];
        let loss_at = |delta: f64| {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[k] += delta;
            sample_gradients(model, &p, input, cfg).unwrap().0.total
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        // entries with no influence on the loss have nothing to compare
        if scale < 1e-7 {
            assert!((analytic - numeric).abs() < 1e-8, "{} [{k}]: {analytic} vs {numeric}", params.name(id));
            continue;
        }
        max_rel_error = max_rel_error.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    GradCheck {
        probes: checked,
        max_rel_error,
    }
}
