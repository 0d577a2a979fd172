//! Frozen-feature evaluation: k-NN and linear probing of phase labels,
//! segmentation metrics on the probe's per-frame predictions, clustering
//! quality, and the procedural-awareness probes.

pub mod cluster;
pub mod knn;
pub mod probe;
pub mod procedural;
pub mod segments;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::params::Parameters;
use crate::net::Network;
use crate::synth::SyntheticVideo;
use crate::tensor::Tensor;

pub use cluster::{ari, ari_nmi, kmeans, nmi};
pub use knn::{knn_classify, knn_predict};
pub use probe::{linear_probe, macro_f1, ProbeConfig, ProbeResult};
pub use procedural::{fwdbwd_probe, progression_curve, spearman, DistanceSummary, ProgressionCurve};
pub use segments::{edit_score, labels_from_segments, segmental_f1, segments_from_labels, Segment};

/// Frozen aggregate embeddings with their labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub video_id: Vec<usize>,
    pub frame_index: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        let n = labels.len();
        Ok(Self {
            features,
            labels,
            video_id: vec![0; n],
            frame_index: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Aggregate embeddings of every frame; `first_video` offsets the ids.
    pub fn extract(network: &Network, params: &Parameters, videos: &[SyntheticVideo], first_video: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut video_id = Vec::new();
        let mut frame_index = Vec::new();
        for (v, video) in videos.iter().enumerate() {
            rows.push(network.encode_cls_batch(params, video.frames())?);
            labels.extend_from_slice(video.labels());
            video_id.extend(std::iter::repeat_n(first_video + v, video.len()));
            frame_index.extend(0..video.len());
        }
        let parts: Vec<&Tensor> = rows.iter().collect();
        Ok(Self {
            features: Tensor::concat_rows(&parts),
            labels,
            video_id,
            frame_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub probe: ProbeConfig,
    /// 0 means one cluster per phase.
    pub num_clusters: usize,
    pub kmeans_restarts: usize,
    /// Leading share of the evaluation videos used to fit k-NN and the probe.
    pub train_fraction: f64,
    /// Frames scored together by the temporal head for progression curves.
    pub progression_window: usize,
    /// Held-out videos scored for progression (0 means all).
    pub progression_videos: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 20,
            probe: ProbeConfig::default(),
            num_clusters: 0,
            kmeans_restarts: 10,
            train_fraction: 0.5,
            progression_window: 1,
            progression_videos: 20,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(Error::config("eval.knn_k", "must be >= 1"));
        }
        if self.num_clusters == 1 {
            return Err(Error::config("eval.num_clusters", "must be 0 (auto) or >= 2"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("eval.train_fraction", "must be in (0, 1)"));
        }
        if self.progression_window == 0 {
            return Err(Error::config("eval.progression_window", "must be >= 1"));
        }
        if self.probe.max_iters == 0 || !(self.probe.step_size > 0.0) || !(self.probe.l2 >= 0.0) {
            return Err(Error::config("eval.probe", "need max_iters >= 1, step_size > 0, l2 >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1At {
    #[serde(rename = "10")]
    pub at_10: f64,
    #[serde(rename = "25")]
    pub at_25: f64,
    #[serde(rename = "50")]
    pub at_50: f64,
}

/// Metrics of one evaluation run. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub knn_acc: f64,
    pub linear_acc: f64,
    pub macro_f1: f64,
    pub f1_at: F1At,
    pub edit: f64,
    pub ari: f64,
    pub nmi: f64,
    /// Only set by the forward/backward probe.
    pub fwdbwd_mean_cos_dist: Option<f64>,
    pub progression_spearman: f64,
    pub train_frames: usize,
    pub test_frames: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// A report plus the per-video progression curves behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// `(video index, labels, curve)` for every scored held-out video.
    pub curves: Vec<(usize, Vec<usize>, ProgressionCurve)>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Split `videos` into a fitting part and a held-out part, then compute every
/// single-encoder metric. `config_hash` is copied into the report.
pub fn evaluate(
    network: &Network,
    params: &Parameters,
    videos: &[SyntheticVideo],
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<Evaluation> {
    cfg.validate()?;
    if videos.len() < 2 {
        return Err(Error::config("eval", "need at least two evaluation videos"));
    }
    let n_train = ((videos.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, videos.len() - 1);
    let (fit_videos, test_videos) = videos.split_at(n_train);
    let train = FeatureSet::extract(network, params, fit_videos, 0)?;
    let test = FeatureSet::extract(network, params, test_videos, n_train)?;

    let knn_acc = knn_classify(&train, &test, cfg.knn_k)?;
    let probe = linear_probe(&train, &test, &cfg.probe)?;

    let (mut edits, mut f10, mut f25, mut f50) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0;
    for video in test_videos {
        let preds = &probe.predictions[offset..offset + video.len()];
        offset += video.len();
        let p = segments_from_labels(preds);
        let g = segments_from_labels(video.labels());
        edits.push(edit_score(&p, &g)?);
        f10.push(segmental_f1(&p, &g, 0.10)?);
        f25.push(segmental_f1(&p, &g, 0.25)?);
        f50.push(segmental_f1(&p, &g, 0.50)?);
    }

    let num_clusters = if cfg.num_clusters > 0 {
        cfg.num_clusters
    } else {
        let mut classes = test.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        classes.len().max(2)
    };
    let clusters = kmeans(&test, num_clusters, cfg.kmeans_restarts, cfg.seed)?;

    let take = if cfg.progression_videos == 0 {
        test_videos.len()
    } else {
        cfg.progression_videos.min(test_videos.len())
    };
    let mut curves = Vec::with_capacity(take);
    for (i, video) in test_videos.iter().take(take).enumerate() {
        let curve = progression_curve(network, params, video, cfg.progression_window)?;
        curves.push((n_train + i, video.labels().to_vec(), curve));
    }
    let progression_spearman = mean(&curves.iter().map(|c| c.2.spearman).collect::<Vec<_>>());

    Ok(Evaluation {
        report: EvalReport {
            config_hash: config_hash.to_string(),
            seed: cfg.seed,
            knn_acc,
            linear_acc: probe.accuracy,
            macro_f1: probe.macro_f1,
            f1_at: F1At {
                at_10: mean(&f10),
                at_25: mean(&f25),
                at_50: mean(&f50),
            },
            edit: mean(&edits),
            ari: ari(&test.labels, &clusters),
            nmi: nmi(&test.labels, &clusters),
            fwdbwd_mean_cos_dist: None,
            progression_spearman,
            train_frames: train.len(),
            test_frames: test.len(),
        },
        curves,
    })
}

/// Column text: `video frame label score`.
pub fn progression_tsv(curves: &[(usize, Vec<usize>, ProgressionCurve)]) -> String {
    let mut out = String::from("video\tframe\tlabel\tscore\n");
    for (video, labels, curve) in curves {
        for (t, (label, score)) in labels.iter().zip(&curve.scores).enumerate() {
            writeln!(out, "{video}\t{t}\t{label}\t{score}").unwrap();
        }
    }
    out
}

/// Column text: `model video frame distance`, one block per named summary.
pub fn distances_tsv(summaries: &[(&str, &DistanceSummary)]) -> String {
    let mut out = String::from("model\tvideo\tframe\tdistance\n");
    for (name, summary) in summaries {
        for d in &summary.distances {
            writeln!(out, "{name}\t{}\t{}\t{}", d.video, d.frame, d.distance).unwrap();
        }
    }
    out
}
