//! Segment-level metrics: edit score and segmental F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

/// Maximal runs of equal labels, in order.
pub fn segments_from_labels(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &class) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if seg.class == class => seg.end = t + 1,
            _ => out.push(Segment {
                class,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

/// Frame labels of a contiguous segment list starting at 0.
pub fn labels_from_segments(segments: &[Segment]) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for seg in segments {
        if seg.start != labels.len() || seg.is_empty() {
            return Err(Error::config("segments", "must be non-empty, contiguous and start at 0"));
        }
        labels.extend(std::iter::repeat_n(seg.class, seg.len()));
    }
    Ok(labels)
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(1 - lev / max(|pred|, |gt|)) * 100` over segment class sequences.
pub fn edit_score(pred: &[Segment], gt: &[Segment]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("segment list"));
    }
    let a: Vec<usize> = pred.iter().map(|s| s.class).collect();
    let b: Vec<usize> = gt.iter().map(|s| s.class).collect();
    let dist = levenshtein(&a, &b);
    Ok((1.0 - dist as f64 / a.len().max(b.len()) as f64) * 100.0)
}

/// Predicted segments, in temporal order, each claim the unmatched
/// same-class ground-truth segment of highest IoU; a claim is a true positive
/// when that IoU exceeds `threshold`.
pub fn segmental_f1(pred: &[Segment], gt: &[Segment], threshold: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("segment list"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("threshold", "must be in (0, 1)"));
    }
    let mut used = vec![false; gt.len()];
    let mut tp = 0usize;
    for p in pred {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, g)| !used[*j] && g.class == p.class)
            .map(|(j, g)| (j, p.iou(g)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((j, iou)) = best {
            if iou > threshold {
                used[j] = true;
                tp += 1;
            }
        }
    }
    let precision = tp as f64 / pred.len() as f64;
    let recall = tp as f64 / gt.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(200.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(class: usize, start: usize, end: usize) -> Segment {
        Segment { class, start, end }
    }

    #[test]
    fn segments_from_runs() {
        assert_eq!(segments_from_labels(&[0, 0, 1]), vec![seg(0, 0, 2), seg(1, 2, 3)]);
        assert_eq!(segments_from_labels(&[3; 5]), vec![seg(3, 0, 5)]);
        assert_eq!(segments_from_labels(&[0, 1, 0, 1]).len(), 4);
        assert_eq!(labels_from_segments(&[seg(0, 0, 2), seg(1, 2, 3)]).unwrap(), vec![0, 0, 1]);
        assert!(labels_from_segments(&[seg(0, 1, 2)]).is_err());
    }

    #[test]
    fn edit_values() {
        let ab = [seg(0, 0, 2), seg(1, 2, 4)];
        assert_eq!(edit_score(&ab, &ab).unwrap(), 100.0);
        let aba = [seg(0, 0, 1), seg(1, 1, 2), seg(0, 2, 3)];
        assert!((edit_score(&aba, &ab).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let cd = [seg(2, 0, 2), seg(3, 2, 4)];
        assert_eq!(edit_score(&cd, &ab).unwrap(), 0.0);
        assert!(edit_score(&[], &ab).is_err());
    }

    #[test]
    fn f1_values() {
        let gt = [seg(0, 0, 5)];
        let pred = [seg(0, 0, 10)];
        assert_eq!(segmental_f1(&pred, &gt, 0.25).unwrap(), 100.0);
        // IoU is exactly 0.5 and the comparison is strict
        assert_eq!(segmental_f1(&pred, &gt, 0.5).unwrap(), 0.0);
        for t in [0.1, 0.25, 0.5] {
            assert_eq!(segmental_f1(&gt, &gt, t).unwrap(), 100.0);
        }
        assert_eq!(segmental_f1(&[seg(1, 0, 5)], &gt, 0.1).unwrap(), 0.0);
        assert!(segmental_f1(&gt, &gt, 1.0).is_err());
    }
}
