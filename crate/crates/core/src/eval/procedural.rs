//! Probes of procedural awareness: forward/backward feature divergence and
//! per-frame progression scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::params::Parameters;
use crate::net::Network;
use crate::synth::SyntheticVideo;
use crate::tensor::{cosine, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDistance {
    pub video: usize,
    pub frame: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub distances: Vec<FrameDistance>,
    pub mean: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Cosine distance `1 - cos` between the aggregate embeddings two encoders
/// assign to every frame of `videos`.
pub fn fwdbwd_probe(
    forward: (&Network, &Parameters),
    backward: (&Network, &Parameters),
    videos: &[SyntheticVideo],
) -> Result<DistanceSummary> {
    let (net_f, params_f) = forward;
    let (net_b, params_b) = backward;
    let (cf, cb) = (net_f.config(), net_b.config());
    if (cf.d_in, cf.dim, cf.patches, cf.encoder_layers, cf.attn_heads)
        != (cb.d_in, cb.dim, cb.patches, cb.encoder_layers, cb.attn_heads)
    {
        return Err(Error::config("probe", "forward and backward encoders have different configs"));
    }
    net_f.check_params(params_f)?;
    net_b.check_params(params_b)?;
    let mut distances = Vec::new();
    for (v, video) in videos.iter().enumerate() {
        let a = net_f.encode_cls_batch(params_f, video.frames())?;
        let b = net_b.encode_cls_batch(params_b, video.frames())?;
        for t in 0..video.len() {
            let distance = (1.0 - cosine(a.row(t), b.row(t))).clamp(0.0, 2.0);
            distances.push(FrameDistance { video: v, frame: t, distance });
        }
    }
    let values: Vec<f64> = distances.iter().map(|d| d.distance).collect();
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Ok(DistanceSummary {
        median: median(&values),
        mean,
        distances,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Min-max normalization to `[0, 1]`; constant input maps to all zeros.
pub fn normalize_unit(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionCurve {
    /// Per-frame scores normalized per video to `[0, 1]`.
    pub scores: Vec<f64>,
    /// Rank correlation of the raw scores with the frame index.
    pub spearman: f64,
}

impl ProgressionCurve {
    pub fn from_scores(raw: &[f64]) -> Self {
        let index: Vec<f64> = (0..raw.len()).map(|t| t as f64).collect();
        Self {
            scores: normalize_unit(raw),
            spearman: spearman(raw, &index),
        }
    }
}

/// Scores every frame with the temporal head. With `window = 1` each frame is
/// scored alone; wider windows score the frame inside the chronological run
/// of neighbours centred on it (clipped at the video ends).
pub fn progression_curve(
    network: &Network,
    params: &Parameters,
    video: &SyntheticVideo,
    window: usize,
) -> Result<ProgressionCurve> {
    if window == 0 {
        return Err(Error::config("eval.progression_window", "must be >= 1"));
    }
    network.check_params(params)?;
    let cls = network.encode_cls_batch(params, video.frames())?;
    let len = video.len();
    let mut raw = Vec::with_capacity(len);
    for t in 0..len {
        let start = t.saturating_sub((window - 1) / 2).min(len.saturating_sub(window));
        let end = (start + window).min(len);
        let rows: Vec<usize> = (start..end).collect();
        let seq: Tensor = cls.gather_rows(&rows);
        let scores = network.head_vid(params, &seq)?;
        raw.push(scores.values()[t - start]);
    }
    Ok(ProgressionCurve::from_scores(&raw))
}
