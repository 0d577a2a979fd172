//! Joint pretraining of the encoder with the clip-ranking, masked-regression
//! and jigsaw branches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PermDictionary};
use crate::net::params::Parameters;
use crate::net::{EncodeOptions, NetConfig, Network};
use crate::optim::{AdamW, Schedule};
use crate::pl::Permutation;
use crate::synth::{build_epoch, ClipSample, EpochSpec, MaskSpec, SyntheticVideo, TripletSample};

/// Loss applied to the clip branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Listwise ranking of the chronological order.
    #[default]
    Pl,
    /// Logistic loss over all frame pairs.
    Pairwise,
    /// Classify which dictionary shuffle was applied to the clip.
    PermCe,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Pl => "pl",
            Objective::Pairwise => "pairwise",
            Objective::PermCe => "perm_ce",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchFlags {
    pub use_vid: bool,
    pub use_mim: bool,
    pub use_jigsaw: bool,
}

impl Default for BranchFlags {
    fn default() -> Self {
        Self {
            use_vid: true,
            use_mim: true,
            use_jigsaw: true,
        }
    }
}

impl BranchFlags {
    pub fn any(&self) -> bool {
        self.use_vid || self.use_mim || self.use_jigsaw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    /// Frames per clip.
    pub clip_len: usize,
    pub mask_ratio: f64,
    pub block_mask: bool,
    /// Requested size of the shuffle dictionary; capped at `clip_len!`.
    pub perm_dict_size: usize,
    /// Inclusive frame range of the triplet offsets.
    pub offset_range: [usize; 2],
    /// Clip/triplet pairs per video and epoch; 0 means `ceil(T / clip_len)`.
    pub samples_per_video: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Draw each triplet from the same video as its clip; otherwise triplets
    /// are reassigned to random clips.
    pub paired_branches: bool,
    pub seed: u64,
    pub branches: BranchFlags,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            warmup_epochs: 3,
            base_lr: 1e-3,
            weight_decay: 0.05,
            loss_weights: LossWeights::default(),
            clip_len: 8,
            mask_ratio: 0.3,
            block_mask: true,
            perm_dict_size: 24,
            offset_range: [2, 3],
            samples_per_video: 0,
            max_grad_norm: 1.0,
            paired_branches: true,
            seed: 0,
            branches: BranchFlags::default(),
            objective: Objective::Pl,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("train.warmup_epochs", "must not exceed train.epochs"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be finite and > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and >= 0"));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(Error::config("train.max_grad_norm", "must be finite and >= 0"));
        }
        if self.clip_len < 2 {
            return Err(Error::config("train.clip_len", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config("train.mask_ratio", "must be in [0, 1]"));
        }
        if self.perm_dict_size == 0 {
            return Err(Error::config("train.perm_dict_size", "must be >= 1"));
        }
        let [lo, hi] = self.offset_range;
        if lo == 0 || lo > hi {
            return Err(Error::config("train.offset_range", "need 1 <= min <= max"));
        }
        self.loss_weights
            .validate()
            .map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("train.{field}"), reason),
                other => other,
            })
    }

    pub fn epoch_spec(&self) -> EpochSpec {
        EpochSpec {
            clip_len: self.clip_len,
            offset_range: self.offset_range,
            samples_per_video: (self.samples_per_video > 0).then_some(self.samples_per_video),
        }
    }
}

/// The network plus the shuffle alphabet of the classification baseline.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub dictionary: PermDictionary,
}

impl Model {
    /// Lay out the network for `cfg`: the shuffle-classification head gets
    /// `clip_len` slots and one class per dictionary entry.
    pub fn new(net: &NetConfig, cfg: &TrainConfig) -> Result<(Self, Parameters)> {
        cfg.validate()?;
        let dictionary = PermDictionary::build(cfg.clip_len, cfg.perm_dict_size, cfg.seed ^ 0x5eed_d1c7)?;
        let net = NetConfig {
            clip_len: cfg.clip_len,
            perm_classes: dictionary.len(),
            ..net.clone()
        };
        let (network, params) = Network::new(net)?;
        Ok((Self { network, dictionary }, params))
    }
}

/// Per-branch losses of one step or averaged over an epoch. Disabled branches
/// report 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub vid: f64,
    pub mim: f64,
    pub jigsaw: f64,
    pub total: f64,
}

impl StepLosses {
    fn add_scaled(&mut self, other: &StepLosses, factor: f64) {
        self.vid += factor * other.vid;
        self.mim += factor * other.mim;
        self.jigsaw += factor * other.jigsaw;
        self.total += factor * other.total;
    }

    fn is_finite(&self) -> bool {
        self.vid.is_finite() && self.mim.is_finite() && self.jigsaw.is_finite() && self.total.is_finite()
    }
}

/// Everything one sample contributes to a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub clip: ClipSample,
    pub triplet: TripletSample,
    pub mask: MaskSpec,
    /// Query row `i` of the jigsaw holds original patch `shuffle.order()[i]`.
    pub shuffle: Permutation,
    /// Dictionary entry applied to the clip by the classification baseline.
    pub perm_class: usize,
}

impl StepInput {
    /// Draws the mask, jigsaw shuffle and dictionary class in a fixed order
    /// regardless of which branches are enabled.
    pub fn draw<R: Rng + ?Sized>(
        clip: ClipSample,
        triplet: TripletSample,
        model: &Model,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let n = model.network.config().patches;
        let mask = MaskSpec::nonempty(cfg.mask_ratio, n, cfg.block_mask, rng)?;
        let shuffle = Permutation::random(n, rng);
        let perm_class = rng.random_range(0..model.dictionary.len());
        Ok(Self {
            clip,
            triplet,
            mask,
            shuffle,
            perm_class,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Batch-mean losses of every step taken.
    pub history: Vec<StepLosses>,
}

impl TrainState {
    pub fn new(params: Parameters, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(&params, cfg.weight_decay),
            params,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
        }
    }
}

/// Clip-branch loss on the tape.
fn clip_loss(model: &Model, tape: &mut Tape, input: &StepInput, cfg: &TrainConfig) -> Result<Var> {
    let net = &model.network;
    let frames = &input.clip.frames;
    let order: Vec<usize> = match cfg.objective {
        Objective::Pl | Objective::Pairwise => (0..frames.len()).collect(),
        Objective::PermCe => model.dictionary.get(input.perm_class).order().to_vec(),
    };
    let mut rows = Vec::with_capacity(order.len());
    for &i in &order {
        let (cls, _) = net.encode_on(tape, &frames[i], EncodeOptions::default())?;
        rows.push(cls);
    }
    let seq = tape.concat_rows(&rows);
    Ok(match cfg.objective {
        Objective::Pl => {
            let scores = net.head_vid_on(tape, seq)?;
            tape.pl_nll(scores, &order)
        }
        Objective::Pairwise => {
            let scores = net.head_vid_on(tape, seq)?;
            tape.pairwise(scores)
        }
        Objective::PermCe => {
            let logits = net.head_perm_on(tape, seq)?;
            tape.cross_entropy(logits, input.perm_class)
        }
    })
}

fn mim_loss(model: &Model, tape: &mut Tape, input: &StepInput) -> Result<Var> {
    let net = &model.network;
    let current = &input.triplet.current;
    let opts = EncodeOptions {
        mask: Some(&input.mask.masked),
        no_positions: false,
    };
    let (_, patches) = net.encode_on(tape, current, opts)?;
    let pred = net.head_mim_on(tape, patches);
    Ok(tape.masked_mse(pred, current.clone(), &input.mask.masked))
}

fn jigsaw_loss(model: &Model, tape: &mut Tape, input: &StepInput) -> Result<Var> {
    let net = &model.network;
    let order = input.shuffle.order();
    let queries_in = input.triplet.current.gather_rows(order);
    let query_mask: Vec<bool> = order.iter().map(|&i| input.mask.masked[i]).collect();
    let opts = EncodeOptions {
        mask: Some(&query_mask),
        no_positions: true,
    };
    let (_, queries) = net.encode_on(tape, &queries_in, opts)?;
    let (_, past) = net.encode_on(tape, &input.triplet.past, EncodeOptions::default())?;
    let (_, future) = net.encode_on(tape, &input.triplet.future, EncodeOptions::default())?;
    let context = tape.concat_rows(&[past, future]);
    let scores = net.head_jigsaw_on(tape, queries, context)?;
    let restore = input.shuffle.inverse();
    Ok(tape.pl_nll(scores, restore.order()))
}

/// Loss and gradient of one sample under the enabled branches.
pub fn sample_gradients(
    model: &Model,
    params: &Parameters,
    input: &StepInput,
    cfg: &TrainConfig,
) -> Result<(StepLosses, Gradients)> {
    let w = &cfg.loss_weights;
    let mut tape = Tape::new(params);
    let mut losses = StepLosses::default();
    let mut terms = Vec::with_capacity(3);
    if cfg.branches.use_vid {
        let l = clip_loss(model, &mut tape, input, cfg)?;
        losses.vid = tape.value(l).item();
        terms.push((w.lambda1, l));
    }
    if cfg.branches.use_mim {
        let l = mim_loss(model, &mut tape, input)?;
        losses.mim = tape.value(l).item();
        terms.push((w.lambda2, l));
    }
    if cfg.branches.use_jigsaw {
        let l = jigsaw_loss(model, &mut tape, input)?;
        losses.jigsaw = tape.value(l).item();
        terms.push((w.lambda3, l));
    }
    if terms.is_empty() {
        return Ok((losses, Gradients::zeros_like(params)));
    }
    let total = tape.weighted_sum(&terms);
    losses.total = tape.value(total).item();
    Ok((losses, tape.backward(total)))
}

/// Batch-mean loss and gradient; samples are summed in order.
pub fn batch_gradients(
    model: &Model,
    params: &Parameters,
    batch: &[StepInput],
    cfg: &TrainConfig,
) -> Result<(StepLosses, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let mut losses = StepLosses::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    for input in batch {
        let (l, g) = sample_gradients(model, params, input, cfg)?;
        losses.add_scaled(&l, scale);
        grads.accumulate(&g);
    }
    grads.scale(scale);
    Ok((losses, grads))
}

/// One optimizer step on the batch. With every branch disabled nothing is
/// updated and the loss is 0.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    batch: &[StepInput],
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<StepLosses> {
    let (losses, mut grads) = batch_gradients(model, &state.params, batch, cfg)?;
    if !losses.is_finite() || !grads.is_finite() {
        return Err(Error::NanLoss {
            step: state.step,
            vid: losses.vid,
            mim: losses.mim,
            jigsaw: losses.jigsaw,
        });
    }
    if cfg.branches.any() {
        if cfg.max_grad_norm > 0.0 {
            let norm = grads.norm();
            if norm > cfg.max_grad_norm {
                grads.scale(cfg.max_grad_norm / norm);
            }
        }
        let lr = schedule.lr_at(state.step);
        state.optimizer.step(&mut state.params, &grads, lr);
    }
    state.step += 1;
    state.history.push(losses);
    Ok(losses)
}

/// Per-epoch training record, one line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub vid: f64,
    pub mim: f64,
    pub jigsaw: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn params(&self) -> &Parameters {
        &self.state.params
    }
}

/// Check that every video fits the network and the sampling settings.
pub fn check_dataset(videos: &[SyntheticVideo], net: &NetConfig, cfg: &TrainConfig) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::Empty("training videos"));
    }
    let min_len = cfg.clip_len.max(2 * cfg.offset_range[1] + 1);
    for video in videos {
        let shape = video.frame(0).shape();
        if shape != (net.patches, net.d_in) {
            return Err(Error::ShapeMismatch {
                context: "dataset frame vs network",
                expected: (net.patches, net.d_in),
                got: shape,
            });
        }
        if video.len() < min_len {
            return Err(Error::config(
                "train.clip_len",
                format!("a video has {} frames but sampling needs at least {min_len}", video.len()),
            ));
        }
    }
    Ok(())
}

pub fn steps_per_epoch(videos: &[SyntheticVideo], cfg: &TrainConfig) -> usize {
    let items: usize = videos
        .iter()
        .map(|v| {
            if cfg.samples_per_video > 0 {
                cfg.samples_per_video
            } else {
                v.len().div_ceil(cfg.clip_len)
            }
        })
        .sum();
    items.div_ceil(cfg.batch_size)
}

pub fn schedule_for(videos: &[SyntheticVideo], cfg: &TrainConfig) -> Schedule {
    let per_epoch = steps_per_epoch(videos, cfg) as u64;
    Schedule {
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_epochs as u64 * per_epoch,
        total_steps: cfg.epochs as u64 * per_epoch,
    }
}

/// Runs `cfg.epochs` epochs over `videos`.
pub fn train(videos: &[SyntheticVideo], net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(videos, net, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    videos: &[SyntheticVideo],
    net: &NetConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let (model, params) = Model::new(net, cfg)?;
    check_dataset(videos, model.network.config(), cfg)?;
    let schedule = schedule_for(videos, cfg);
    let mut state = TrainState::new(params, cfg);
    let spec = cfg.epoch_spec();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut items = build_epoch(videos, &spec, &mut state.rng)?;
        if !cfg.paired_branches {
            let mut triplets: Vec<TripletSample> = items.iter().map(|i| i.triplet.clone()).collect();
            triplets.shuffle(&mut state.rng);
            for (item, t) in items.iter_mut().zip(triplets) {
                item.triplet = t;
            }
        }
        let mut sum = StepLosses::default();
        let mut steps = 0usize;
        let mut lr = 0.0;
        for chunk in items.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for item in chunk {
                batch.push(StepInput::draw(
                    item.clip.clone(),
                    item.triplet.clone(),
                    &model,
                    cfg,
                    &mut state.rng,
                )?);
            }
            lr = schedule.lr_at(state.step);
            let losses = train_step(&model, &mut state, &batch, cfg, &schedule)?;
            sum.add_scaled(&losses, 1.0);
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr,
            vid: sum.vid / n,
            mim: sum.mim / n,
            jigsaw: sum.jigsaw / n,
            total: sum.total / n,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { model, state, log })
}

/// Serialize a training log as one JSON object per line.
pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    let mut out = String::new();
    for record in log {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}
