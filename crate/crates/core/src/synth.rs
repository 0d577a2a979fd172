//! Synthetic procedural sequences and the sampling procedures used for
//! pretraining: sparse clips, frame triplets, block masks and time reversal.
//!
//! A video is a fixed sequence of phases. Every frame is an `N x d_in` grid of
//! patch features built from
//!
//! * a phase anchor shared across videos, jittered per video,
//! * a per-patch phase pattern shared across videos,
//! * a per-video patch layout that stays constant over time,
//! * a within-phase drift along a phase-specific direction,
//! * noise: i.i.d. per patch, plus a frame-global component shared by all
//!   patches that lives in a fixed low-rank subspace of the feature space and
//!   follows a stationary AR(1) process over time.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_phases: usize,
    /// Inclusive `[min, max]` phase length in frames.
    pub phase_len_range: [usize; 2],
    pub d_in: usize,
    pub patches: usize,
    /// Standard deviation of the per-patch noise.
    pub noise_sigma: f64,
    /// Standard deviation of the frame-global noise, in units of `noise_sigma`.
    pub global_noise: f64,
    /// Lag-one autocorrelation of the frame-global noise, in `[0, 1)`.
    pub global_smoothness: f64,
    /// Dimension of the subspace holding the frame-global noise.
    pub global_rank: usize,
    /// Scale of the within-phase progress signal.
    pub drift: f64,
    /// Per-video perturbation of the phase anchors.
    pub anchor_jitter: f64,
    /// Scale of the shared per-patch phase patterns.
    pub pattern_scale: f64,
    /// Scale of the per-video, time-constant patch layout.
    pub layout_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_phases: 5,
            phase_len_range: [20, 40],
            d_in: 8,
            patches: 16,
            noise_sigma: 0.5,
            global_noise: 12.0,
            global_smoothness: 0.9,
            global_rank: 4,
            drift: 1.5,
            anchor_jitter: 0.3,
            pattern_scale: 0.5,
            layout_scale: 1.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_phases < 2 {
            return Err(Error::config("generator.num_phases", "must be >= 2"));
        }
        let [lo, hi] = self.phase_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::config("generator.phase_len_range", "need 1 <= min <= max"));
        }
        if self.d_in == 0 {
            return Err(Error::config("generator.d_in", "must be >= 1"));
        }
        if self.global_rank > self.d_in {
            return Err(Error::config("generator.global_rank", "must not exceed generator.d_in"));
        }
        if self.patches == 0 {
            return Err(Error::config("generator.patches", "must be >= 1"));
        }
        for (name, v) in [
            ("generator.noise_sigma", self.noise_sigma),
            ("generator.global_noise", self.global_noise),
            ("generator.drift", self.drift),
            ("generator.anchor_jitter", self.anchor_jitter),
            ("generator.pattern_scale", self.pattern_scale),
            ("generator.layout_scale", self.layout_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.global_smoothness) {
            return Err(Error::config("generator.global_smoothness", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    frames: Vec<Tensor>,
    labels: Vec<usize>,
}

impl SyntheticVideo {
    pub fn new(frames: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if frames.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: frames.len(),
                got: labels.len(),
            });
        }
        if frames.is_empty() {
            return Err(Error::Empty("video"));
        }
        let shape = frames[0].shape();
        if let Some(bad) = frames.iter().find(|f| f.shape() != shape) {
            return Err(Error::ShapeMismatch {
                context: "video frame",
                expected: shape,
                got: bad.shape(),
            });
        }
        Ok(Self { frames, labels })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Tensor {
        &self.frames[t]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Quantities shared by every video of one generator seed.
struct Prototypes {
    anchors: Vec<Vec<f64>>,
    patterns: Vec<Tensor>,
    directions: Vec<Vec<f64>>,
    /// Orthonormal rows spanning the frame-global noise.
    nuisance_basis: Vec<Vec<f64>>,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, n, 1.0);
    let norm = crate::tensor::norm(&v).max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

impl Prototypes {
    fn new(config: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n, d) = (config.patches, config.d_in);
        let anchors = (0..config.num_phases).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
        let patterns = (0..config.num_phases)
            .map(|_| Tensor::from_vec(n, d, gaussian_vec(&mut rng, n * d, config.pattern_scale)).unwrap())
            .collect();
        let directions = (0..config.num_phases).map(|_| unit_vec(&mut rng, d)).collect();
        let mut nuisance_basis: Vec<Vec<f64>> = Vec::with_capacity(config.global_rank);
        while nuisance_basis.len() < config.global_rank {
            let mut v = gaussian_vec(&mut rng, d, 1.0);
            for b in &nuisance_basis {
                let proj = crate::tensor::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
            let norm = crate::tensor::norm(&v);
            if norm > 1e-6 {
                nuisance_basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Self {
            anchors,
            patterns,
            directions,
            nuisance_basis,
        }
    }

    fn video<R: Rng + ?Sized>(&self, config: &GeneratorConfig, rng: &mut R) -> SyntheticVideo {
        let (n, d) = (config.patches, config.d_in);
        let [lo, hi] = config.phase_len_range;
        let lengths: Vec<usize> = (0..config.num_phases).map(|_| rng.random_range(lo..=hi)).collect();
        let anchors: Vec<Vec<f64>> = self
            .anchors
            .iter()
            .map(|a| {
                let jitter = gaussian_vec(rng, d, config.anchor_jitter);
                a.iter().zip(jitter).map(|(x, j)| x + j).collect()
            })
            .collect();
        let layout = Tensor::from_vec(n, d, gaussian_vec(rng, n * d, config.layout_scale)).unwrap();

        let total: usize = lengths.iter().sum();
        let mut frames = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        let global_sigma = config.noise_sigma * config.global_noise;
        let rank = self.nuisance_basis.len();
        let rho = config.global_smoothness;
        let mut latent = if global_sigma > 0.0 {
            gaussian_vec(rng, rank, global_sigma)
        } else {
            vec![0.0; rank]
        };
        for (phase, &len) in lengths.iter().enumerate() {
            for j in 0..len {
                let progress = if len > 1 { j as f64 / (len - 1) as f64 } else { 0.0 };
                if global_sigma > 0.0 && !frames.is_empty() {
                    let innovation = gaussian_vec(rng, rank, global_sigma * (1.0 - rho * rho).sqrt());
                    for (z, e) in latent.iter_mut().zip(innovation) {
                        *z = rho * *z + e;
                    }
                }
                let mut global = vec![0.0; d];
                for (z, b) in latent.iter().zip(&self.nuisance_basis) {
                    global.iter_mut().zip(b).for_each(|(g, x)| *g += z * x);
                }
                let mut frame = Tensor::zeros(n, d);
                for p in 0..n {
                    let pattern = self.patterns[phase].row(p);
                    let lay = layout.row(p);
                    let row = frame.row_mut(p);
                    for c in 0..d {
                        let noise = if config.noise_sigma > 0.0 {
                            config.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        row[c] = anchors[phase][c]
                            + pattern[c]
                            + lay[c]
                            + config.drift * progress * self.directions[phase][c]
                            + global[c]
                            + noise;
                    }
                }
                frames.push(frame);
                labels.push(phase);
            }
        }
        SyntheticVideo { frames, labels }
    }
}

/// One video. Shared structure comes from `config.seed`; per-video variation
/// (phase lengths, anchor jitter, layout, noise) comes from `rng`.
pub fn generate_video<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<SyntheticVideo> {
    config.validate()?;
    Ok(Prototypes::new(config).video(config, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub videos: Vec<SyntheticVideo>,
}

const DATA_MAGIC: &[u8; 8] = b"PLSTDATA";
pub const DATASET_VERSION: u32 = 1;
const BYTE_ORDER_MARK: u32 = 0x0102_0304;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    byte_order: String,
    generator: GeneratorConfig,
    patches: usize,
    d_in: usize,
    lengths: Vec<usize>,
}

impl Dataset {
    /// `num_videos` videos; video `i` draws from stream `i` of a generator
    /// keyed by `config.seed`, so prefixes of larger sets agree.
    pub fn generate(config: &GeneratorConfig, num_videos: usize) -> Result<Self> {
        Self::generate_range(config, 0, num_videos)
    }

    /// Videos `first..first + count` of the stream family of `config.seed`;
    /// disjoint ranges give disjoint videos of the same procedure.
    pub fn generate_range(config: &GeneratorConfig, first: usize, count: usize) -> Result<Self> {
        config.validate()?;
        let protos = Prototypes::new(config);
        let videos = (first..first + count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64 + 1);
                protos.video(config, &mut rng)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            videos,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(SyntheticVideo::len).sum()
    }

    /// Every video reversed in time.
    pub fn reversed(&self) -> Self {
        Self {
            config: self.config.clone(),
            videos: self.videos.iter().map(reverse_video).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = DatasetHeader {
            version: DATASET_VERSION,
            byte_order: "little".into(),
            generator: self.config.clone(),
            patches: self.config.patches,
            d_in: self.config.d_in,
            lengths: self.videos.iter().map(SyntheticVideo::len).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let per_frame = self.config.patches * self.config.d_in;
        let mut out = Vec::with_capacity(24 + header.len() + self.num_frames() * (8 + 8 * per_frame));
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&BYTE_ORDER_MARK.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for video in &self.videos {
            for &label in video.labels() {
                out.extend_from_slice(&(label as u64).to_le_bytes());
            }
            for frame in video.frames() {
                for v in frame.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let out = &bytes[pos..end];
            pos = end;
            Ok(out)
        };
        if take(8)? != DATA_MAGIC {
            return Err(bad("not a dataset (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) != BYTE_ORDER_MARK {
            return Err(bad("byte-order mark mismatch"));
        }
        let header_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: DatasetHeader =
            serde_json::from_slice(take(header_len)?).map_err(|e| bad(&format!("header: {e}")))?;
        if header.byte_order != "little" {
            return Err(bad("only little-endian data is supported"));
        }
        if header.patches != header.generator.patches || header.d_in != header.generator.d_in {
            return Err(bad("frame shape disagrees with generator config"));
        }
        let (n, d) = (header.patches, header.d_in);
        let mut videos = Vec::with_capacity(header.lengths.len());
        for &len in &header.lengths {
            let labels = take(8 * len)?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            let mut frames = Vec::with_capacity(len);
            for _ in 0..len {
                let data = take(8 * n * d)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                frames.push(Tensor::from_vec(n, d, data)?);
            }
            videos.push(SyntheticVideo::new(frames, labels).map_err(|e| bad(&e.to_string()))?);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after video data"));
        }
        Ok(Self {
            config: header.generator,
            videos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// `k` chronologically ordered frames with a constant stride.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub frames: Vec<Tensor>,
    pub t0: usize,
    pub dt: usize,
    pub indices: Vec<usize>,
}

/// Number of strides `dt >= 1` with `t0 + (k - 1) * dt < len`.
fn valid_strides(len: usize, k: usize, t0: usize) -> usize {
    if k <= 1 {
        1
    } else {
        (len - 1 - t0) / (k - 1)
    }
}

/// Start uniform over valid starts, then stride uniform over valid strides
/// for that start. `k = 1` uses stride 1.
pub fn sample_clip<R: Rng + ?Sized>(video: &SyntheticVideo, k: usize, rng: &mut R) -> Result<ClipSample> {
    let len = video.len();
    if k == 0 {
        return Err(Error::Empty("clip"));
    }
    if len < k {
        return Err(Error::DimensionMismatch { expected: k, got: len });
    }
    let t0 = rng.random_range(0..=len - k);
    let dt = rng.random_range(1..=valid_strides(len, k, t0));
    let indices: Vec<usize> = (0..k).map(|i| t0 + i * dt).collect();
    Ok(ClipSample {
        frames: indices.iter().map(|&t| video.frame(t).clone()).collect(),
        t0,
        dt,
        indices,
    })
}

/// A frame with one earlier and one later neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub past: Tensor,
    pub current: Tensor,
    pub future: Tensor,
    pub index: usize,
    pub tau1: usize,
    pub tau2: usize,
}

/// Offsets uniform over `offset_range` (inclusive), then the current index
/// uniform over positions where both neighbours exist.
pub fn sample_triplet<R: Rng + ?Sized>(
    video: &SyntheticVideo,
    offset_range: [usize; 2],
    rng: &mut R,
) -> Result<TripletSample> {
    let [lo, hi] = offset_range;
    if lo == 0 || lo > hi {
        return Err(Error::config("offset_range", "need 1 <= min <= max"));
    }
    let len = video.len();
    if len <= 2 * hi {
        return Err(Error::DimensionMismatch {
            expected: 2 * hi + 1,
            got: len,
        });
    }
    let tau1 = rng.random_range(lo..=hi);
    let tau2 = rng.random_range(lo..=hi);
    let index = rng.random_range(tau1..len - tau2);
    Ok(TripletSample {
        past: video.frame(index - tau1).clone(),
        current: video.frame(index).clone(),
        future: video.frame(index + tau2).clone(),
        index,
        tau1,
        tau2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub block: bool,
    pub masked: Vec<bool>,
}

fn grid_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n).then_some(side)
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// One axis-aligned rectangle on the `sqrt(N) x sqrt(N)` grid whose area
    /// is as close to `round(ratio * N)` as any fitting rectangle allows
    /// (within one cell). Shape and placement are uniform among the closest.
    pub fn block<R: Rng + ?Sized>(ratio: f64, n: usize, rng: &mut R) -> Result<Self> {
        check_ratio(ratio)?;
        let side = grid_side(n).ok_or_else(|| Error::config("mask", format!("block masking needs a square patch count, got {n}")))?;
        let target = (ratio * n as f64).round() as usize;
        let mut masked = vec![false; n];
        if target > 0 {
            let mut best = usize::MAX;
            let mut shapes = Vec::new();
            for h in 1..=side {
                for w in 1..=side {
                    let gap = (h * w).abs_diff(target);
                    if gap < best {
                        best = gap;
                        shapes.clear();
                    }
                    if gap == best {
                        shapes.push((h, w));
                    }
                }
            }
            let (h, w) = shapes[rng.random_range(0..shapes.len())];
            let top = rng.random_range(0..=side - h);
            let left = rng.random_range(0..=side - w);
            for r in top..top + h {
                for c in left..left + w {
                    masked[r * side + c] = true;
                }
            }
        }
        Ok(Self {
            ratio,
            block: true,
            masked,
        })
    }

    /// Exactly `round(ratio * N)` positions chosen uniformly.
    pub fn scattered<R: Rng + ?Sized>(ratio: f64, n: usize, rng: &mut R) -> Result<Self> {
        check_ratio(ratio)?;
        let target = (ratio * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut masked = vec![false; n];
        for &i in &order[..target] {
            masked[i] = true;
        }
        Ok(Self {
            ratio,
            block: false,
            masked,
        })
    }

    /// A mask with at least one position set; falls back to a single random
    /// patch when the ratio rounds to zero.
    pub fn nonempty<R: Rng + ?Sized>(ratio: f64, n: usize, block: bool, rng: &mut R) -> Result<Self> {
        let mut spec = if block {
            Self::block(ratio, n, rng)?
        } else {
            Self::scattered(ratio, n, rng)?
        };
        if spec.count() == 0 {
            let i = rng.random_range(0..n);
            spec.masked[i] = true;
        }
        Ok(spec)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config("mask_ratio", "must be in [0, 1]"));
    }
    Ok(())
}

/// Masked rows replaced by zeros; the trainable token is substituted inside
/// the encoder instead.
pub fn apply_block_mask(frame: &Tensor, spec: &MaskSpec) -> Result<(Tensor, Vec<bool>)> {
    if spec.masked.len() != frame.rows() {
        return Err(Error::DimensionMismatch {
            expected: frame.rows(),
            got: spec.masked.len(),
        });
    }
    if spec.block && grid_side(frame.rows()).is_none() {
        return Err(Error::config("mask", "block masking needs a square patch count"));
    }
    let mut out = frame.clone();
    for (r, _) in spec.masked.iter().enumerate().filter(|(_, &m)| m) {
        out.row_mut(r).fill(0.0);
    }
    Ok((out, spec.masked.clone()))
}

pub fn reverse_video(video: &SyntheticVideo) -> SyntheticVideo {
    SyntheticVideo {
        frames: video.frames.iter().rev().cloned().collect(),
        labels: video.labels.iter().rev().copied().collect(),
    }
}

/// Sampling settings for one pass over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSpec {
    pub clip_len: usize,
    pub offset_range: [usize; 2],
    /// Clip/triplet pairs drawn per video; `None` means `ceil(T / k)`.
    pub samples_per_video: Option<usize>,
}

/// A clip and a triplet drawn from the same video.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochItem {
    pub video: usize,
    pub clip: ClipSample,
    pub triplet: TripletSample,
}

/// One epoch of paired samples in shuffled order. Every item carries exactly
/// one clip and one triplet, so both branches see the same number of samples.
pub fn build_epoch<R: Rng + ?Sized>(videos: &[SyntheticVideo], spec: &EpochSpec, rng: &mut R) -> Result<Vec<EpochItem>> {
    let mut items = Vec::new();
    for (v, video) in videos.iter().enumerate() {
        let count = spec
            .samples_per_video
            .unwrap_or_else(|| video.len().div_ceil(spec.clip_len.max(1)));
        for _ in 0..count {
            let clip = sample_clip(video, spec.clip_len, rng)?;
            let triplet = sample_triplet(video, spec.offset_range, rng)?;
            items.push(EpochItem { video: v, clip, triplet });
        }
    }
    items.shuffle(rng);
    Ok(items)
}
