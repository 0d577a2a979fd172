//! The frame encoder and its heads.
//!
//! The encoder is a small pre-norm transformer over patch tokens with a
//! prepended aggregate token. Heads:
//!
//! * temporal head: MLP reduction, one self-attention block without positional
//!   encoding, MLP to one score per frame;
//! * jigsaw head: cross-attention from query patches onto context patches,
//!   self-attention refinement, MLP to one score per query patch;
//! * masked-regression head: linear map from patch embeddings back to input
//!   features;
//! * shuffle-classification head (baseline only): like the temporal head but
//!   with learned slot embeddings and a pooled classifier.

pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pl::ScoreVector;
use crate::tensor::Tensor;
use params::{ParamId, ParamStore, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Feature width of one input patch.
    pub d_in: usize,
    /// Embedding width.
    pub dim: usize,
    /// Patches per frame.
    pub patches: usize,
    pub encoder_layers: usize,
    pub head_hidden: usize,
    pub attn_heads: usize,
    /// Slot count of the shuffle-classification head.
    pub clip_len: usize,
    /// Class count of the shuffle-classification head.
    pub perm_classes: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            dim: 32,
            patches: 16,
            encoder_layers: 2,
            head_hidden: 32,
            attn_heads: 2,
            clip_len: 8,
            perm_classes: 24,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("net.d_in", self.d_in),
            ("net.dim", self.dim),
            ("net.patches", self.patches),
            ("net.head_hidden", self.head_hidden),
            ("net.attn_heads", self.attn_heads),
            ("net.clip_len", self.clip_len),
            ("net.perm_classes", self.perm_classes),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !self.dim.is_multiple_of(self.attn_heads) {
            return Err(Error::config("net.dim", "must be divisible by attn_heads"));
        }
        if !self.head_hidden.is_multiple_of(self.attn_heads) {
            return Err(Error::config("net.head_hidden", "must be divisible by attn_heads"));
        }
        Ok(())
    }
}

/// Encoder output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbedding {
    pub cls: Vec<f64>,
    pub patches: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer block; `kv_norm` is present for cross-attention.
#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    kv_norm: Option<Norm>,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Encoder {
    patch: Linear,
    pos: ParamId,
    cls: ParamId,
    mask_token: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
}

#[derive(Debug, Clone, Copy)]
struct VidHead {
    reduce: Linear,
    block: Block,
    norm: Norm,
    fc: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct JigsawHead {
    cross: Block,
    refine: Block,
    norm: Norm,
    fc: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct PermHead {
    reduce: Linear,
    slots: ParamId,
    block: Block,
    norm: Norm,
    out: Linear,
}

/// Options for one encoder pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions<'a> {
    /// Patches replaced by the learned mask token.
    pub mask: Option<&'a [bool]>,
    /// Skip the learned positional embedding (jigsaw queries).
    pub no_positions: bool,
}

/// Layout of the whole model; parameter values live in [`Parameters`].
#[derive(Debug, Clone)]
pub struct Network {
    config: NetConfig,
    encoder: Encoder,
    vid: VidHead,
    jigsaw: JigsawHead,
    mim: Linear,
    perm: PermHead,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data).unwrap())
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::filled(rows, cols, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            b: self.constant(format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.constant(format!("{name}.g"), 1, width, 1.0),
            b: self.constant(format!("{name}.b"), 1, width, 0.0),
        }
    }

    fn block(&mut self, name: &str, width: usize, heads: usize, cross: bool) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), width),
            kv_norm: cross.then(|| self.norm(&format!("{name}.kv_norm"), width)),
            attn: Attention {
                q: self.linear(&format!("{name}.attn.q"), width, width),
                k: self.linear(&format!("{name}.attn.k"), width, width),
                v: self.linear(&format!("{name}.attn.v"), width, width),
                out: self.linear(&format!("{name}.attn.out"), width, width),
                heads,
            },
            norm2: self.norm(&format!("{name}.norm2"), width),
            mlp: Mlp {
                fc1: self.linear(&format!("{name}.mlp.fc1"), width, 2 * width),
                fc2: self.linear(&format!("{name}.mlp.fc2"), 2 * width, width),
            },
        }
    }
}

impl Network {
    /// Lay out the model and draw fresh parameters from `config.seed`.
    pub fn new(config: NetConfig) -> Result<(Self, Parameters)> {
        config.validate()?;
        let c = &config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(c.seed),
            store: ParamStore::default(),
        };
        let encoder = Encoder {
            patch: init.linear("encoder.patch", c.d_in, c.dim),
            pos: init.uniform("encoder.pos".into(), c.patches, c.dim, 0.1),
            cls: init.uniform("encoder.cls".into(), 1, c.dim, 0.1),
            mask_token: init.constant("encoder.mask_token".into(), 1, c.d_in, 0.0),
            blocks: (0..c.encoder_layers)
                .map(|i| init.block(&format!("encoder.blocks.{i}"), c.dim, c.attn_heads, false))
                .collect(),
            norm: init.norm("encoder.norm", c.dim),
        };
        let vid = VidHead {
            reduce: init.linear("vid.reduce", c.dim, c.head_hidden),
            block: init.block("vid.block", c.head_hidden, c.attn_heads, false),
            norm: init.norm("vid.norm", c.head_hidden),
            fc: init.linear("vid.fc", c.head_hidden, c.head_hidden),
            out: init.linear("vid.out", c.head_hidden, 1),
        };
        let jigsaw = JigsawHead {
            cross: init.block("jigsaw.cross", c.dim, c.attn_heads, true),
            refine: init.block("jigsaw.refine", c.dim, c.attn_heads, false),
            norm: init.norm("jigsaw.norm", c.dim),
            fc: init.linear("jigsaw.fc", c.dim, c.head_hidden),
            out: init.linear("jigsaw.out", c.head_hidden, 1),
        };
        let mim = init.linear("mim.out", c.dim, c.d_in);
        let perm = PermHead {
            reduce: init.linear("perm.reduce", c.dim, c.head_hidden),
            slots: init.uniform("perm.slots".into(), c.clip_len, c.head_hidden, 0.1),
            block: init.block("perm.block", c.head_hidden, c.attn_heads, false),
            norm: init.norm("perm.norm", c.head_hidden),
            out: init.linear("perm.out", c.head_hidden, c.perm_classes),
        };
        let network = Network {
            config,
            encoder,
            vid,
            jigsaw,
            mim,
            perm,
        };
        Ok((network, init.store.finish()))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        let expected = (self.config.patches, self.config.d_in);
        if frame.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "frame",
                expected,
                got: frame.shape(),
            });
        }
        Ok(())
    }

    /// Encode one `N x d_in` frame on the tape; returns the aggregate row and
    /// the `N x D` patch rows.
    pub fn encode_on(&self, tape: &mut Tape, frame: &Tensor, opts: EncodeOptions) -> Result<(Var, Var)> {
        self.check_frame(frame)?;
        let enc = &self.encoder;
        let mut x = tape.constant(frame.clone());
        if let Some(mask) = opts.mask {
            if mask.len() != self.config.patches {
                return Err(Error::DimensionMismatch {
                    expected: self.config.patches,
                    got: mask.len(),
                });
            }
            if mask.iter().any(|&m| m) {
                let token = tape.param(enc.mask_token);
                x = tape.replace_rows(x, token, mask);
            }
        }
        let mut h = linear(tape, enc.patch, x);
        if !opts.no_positions {
            let pos = tape.param(enc.pos);
            h = tape.add(h, pos);
        }
        let cls = tape.param(enc.cls);
        let mut tokens = tape.concat_rows(&[cls, h]);
        for block in &enc.blocks {
            tokens = block_forward(tape, block, tokens, None);
        }
        let tokens = layer_norm(tape, enc.norm, tokens);
        let n = self.config.patches;
        let cls_out = tape.slice_rows(tokens, 0, 1);
        let patches = tape.slice_rows(tokens, 1, n + 1);
        Ok((cls_out, patches))
    }

    /// Temporal head on a `k x D` stack of aggregate rows; returns `k x 1` scores.
    pub fn head_vid_on(&self, tape: &mut Tape, cls_seq: Var) -> Result<Var> {
        let (k, d) = tape.shape(cls_seq);
        if d != self.config.dim || k == 0 {
            return Err(Error::ShapeMismatch {
                context: "head_vid input",
                expected: (k.max(1), self.config.dim),
                got: (k, d),
            });
        }
        let h = &self.vid;
        let x = linear(tape, h.reduce, cls_seq);
        let x = tape.gelu(x);
        let x = block_forward(tape, &h.block, x, None);
        let x = layer_norm(tape, h.norm, x);
        let x = linear(tape, h.fc, x);
        let x = tape.gelu(x);
        Ok(linear(tape, h.out, x))
    }

    /// Jigsaw head: `queries` (`N x D`) attend onto `context` (`M x D`);
    /// returns `N x 1` scores.
    pub fn head_jigsaw_on(&self, tape: &mut Tape, queries: Var, context: Var) -> Result<Var> {
        let d = self.config.dim;
        for (context_name, v) in [("jigsaw queries", queries), ("jigsaw context", context)] {
            let shape = tape.shape(v);
            if shape.1 != d || shape.0 == 0 {
                return Err(Error::ShapeMismatch {
                    context: context_name,
                    expected: (shape.0.max(1), d),
                    got: shape,
                });
            }
        }
        let h = &self.jigsaw;
        let x = block_forward(tape, &h.cross, queries, Some(context));
        let x = block_forward(tape, &h.refine, x, None);
        let x = layer_norm(tape, h.norm, x);
        let x = linear(tape, h.fc, x);
        let x = tape.gelu(x);
        Ok(linear(tape, h.out, x))
    }

    /// Masked-regression head: `N x D` patch rows to `N x d_in` predictions.
    pub fn head_mim_on(&self, tape: &mut Tape, patches: Var) -> Var {
        linear(tape, self.mim, patches)
    }

    /// Shuffle-classification head on `clip_len x D` slots; returns `1 x M` logits.
    pub fn head_perm_on(&self, tape: &mut Tape, cls_seq: Var) -> Result<Var> {
        let (k, d) = tape.shape(cls_seq);
        if k != self.config.clip_len || d != self.config.dim {
            return Err(Error::ShapeMismatch {
                context: "head_perm input",
                expected: (self.config.clip_len, self.config.dim),
                got: (k, d),
            });
        }
        let h = &self.perm;
        let x = linear(tape, h.reduce, cls_seq);
        let x = tape.gelu(x);
        let slots = tape.param(h.slots);
        let x = tape.add(x, slots);
        let x = block_forward(tape, &h.block, x, None);
        let x = layer_norm(tape, h.norm, x);
        let pooled = tape.mean_rows(x);
        Ok(linear(tape, h.out, pooled))
    }

    /// Frozen-feature pass over one frame.
    pub fn encode_frame(&self, params: &Parameters, frame: &Tensor) -> Result<FrameEmbedding> {
        let mut tape = Tape::new(params);
        let (cls, patches) = self.encode_on(&mut tape, frame, EncodeOptions::default())?;
        Ok(FrameEmbedding {
            cls: tape.value(cls).data().to_vec(),
            patches: tape.value(patches).clone(),
        })
    }

    /// Aggregate embeddings of many frames, one row each.
    pub fn encode_cls_batch(&self, params: &Parameters, frames: &[Tensor]) -> Result<Tensor> {
        let mut out = Tensor::zeros(frames.len(), self.config.dim);
        // one tape per chunk keeps the parameter copies amortized without growing unbounded
        for (chunk_idx, chunk) in frames.chunks(64).enumerate() {
            let mut tape = Tape::new(params);
            for (i, frame) in chunk.iter().enumerate() {
                let (cls, _) = self.encode_on(&mut tape, frame, EncodeOptions::default())?;
                out.row_mut(chunk_idx * 64 + i).copy_from_slice(tape.value(cls).data());
            }
        }
        Ok(out)
    }

    pub fn head_vid(&self, params: &Parameters, cls_seq: &Tensor) -> Result<ScoreVector> {
        let mut tape = Tape::new(params);
        let x = tape.constant(cls_seq.clone());
        let s = self.head_vid_on(&mut tape, x)?;
        ScoreVector::new(tape.value(s).data().to_vec())
    }

    pub fn head_jigsaw(&self, params: &Parameters, queries: &Tensor, context: &Tensor) -> Result<ScoreVector> {
        let mut tape = Tape::new(params);
        let q = tape.constant(queries.clone());
        let c = tape.constant(context.clone());
        let s = self.head_jigsaw_on(&mut tape, q, c)?;
        ScoreVector::new(tape.value(s).data().to_vec())
    }

    /// Check that `params` has exactly this network's names and shapes.
    pub fn check_params(&self, params: &Parameters) -> Result<()> {
        let (_, reference) = Network::new(self.config.clone())?;
        if reference.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: reference.len(),
                got: params.len(),
            });
        }
        for ((rn, rt), (pn, pt)) in reference.iter().zip(params.iter()) {
            if rn != pn || rt.shape() != pt.shape() {
                return Err(Error::Config {
                    field: pn.to_string(),
                    reason: format!("expected parameter {rn} with shape {:?}", rt.shape()),
                });
            }
        }
        Ok(())
    }
}

fn linear(tape: &mut Tape, l: Linear, x: Var) -> Var {
    let w = tape.param(l.w);
    let b = tape.param(l.b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn layer_norm(tape: &mut Tape, n: Norm, x: Var) -> Var {
    let g = tape.param(n.g);
    let b = tape.param(n.b);
    tape.layer_norm(x, g, b)
}

/// Multi-head scaled dot-product attention of `q_in` rows over `kv_in` rows.
fn attention(tape: &mut Tape, a: &Attention, q_in: Var, kv_in: Var) -> Var {
    let q = linear(tape, a.q, q_in);
    let k = linear(tape, a.k, kv_in);
    let v = linear(tape, a.v, kv_in);
    let width = tape.shape(q).1;
    let head_dim = width / a.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(a.heads);
    for h in 0..a.heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if a.heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi), tape.slice_cols(k, lo, hi), tape.slice_cols(v, lo, hi))
        };
        let logits = tape.matmul_t(qh, kh);
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits);
        outs.push(tape.matmul(weights, vh));
    }
    let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
    linear(tape, a.out, merged)
}

fn block_forward(tape: &mut Tape, b: &Block, x: Var, context: Option<Var>) -> Var {
    let q_in = layer_norm(tape, b.norm1, x);
    let kv_in = match (context, b.kv_norm) {
        (Some(ctx), Some(n)) => layer_norm(tape, n, ctx),
        (Some(ctx), None) => ctx,
        (None, _) => q_in,
    };
    let attn = attention(tape, &b.attn, q_in, kv_in);
    let x = tape.add(x, attn);
    let h = layer_norm(tape, b.norm2, x);
    let h = linear(tape, b.mlp.fc1, h);
    let h = tape.gelu(h);
    let h = linear(tape, b.mlp.fc2, h);
    tape.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pl::Permutation;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn small() -> (Network, Parameters) {
        Network::new(NetConfig::default()).unwrap()
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let (net, params) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_tensor(&mut rng, 16, 8, 1.0);
        let a = net.encode_frame(&params, &frame).unwrap();
        let b = net.encode_frame(&params, &frame).unwrap();
        assert_eq!(a.cls.len(), 32);
        assert_eq!(a.patches.shape(), (16, 32));
        assert_eq!(a, b);
        assert!(net.encode_frame(&params, &Tensor::zeros(15, 8)).is_err());
        let (_, again) = small();
        assert_eq!(params, again);
    }

    #[test]
    fn zero_input_with_zeroed_projection_is_finite() {
        let (net, mut params) = small();
        let id = params.find("encoder.patch.w").unwrap();
        params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let e = net.encode_frame(&params, &Tensor::zeros(16, 8)).unwrap();
        assert!(e.cls.iter().all(|v| v.is_finite()));
        assert!(e.patches.is_finite());
    }

    #[test]
    fn bounded_inputs_keep_activations_finite() {
        let (net, params) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let frame = random_tensor(&mut rng, 16, 8, 10.0);
            let e = net.encode_frame(&params, &frame).unwrap();
            assert!(e.patches.is_finite());
        }
    }

    #[test]
    fn vid_head_is_permutation_equivariant() {
        let (net, params) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = net.head_vid(&params, &random_tensor(&mut rng, 1, 32, 1.0)).unwrap();
        assert_eq!(single.len(), 1);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, 8, 32, 1.0);
            let s = net.head_vid(&params, &x).unwrap();
            assert_eq!(s.len(), 8);
            let pi = Permutation::random(8, &mut rng);
            let sp = net.head_vid(&params, &x.gather_rows(pi.order())).unwrap();
            for (i, &src) in pi.order().iter().enumerate() {
                assert!((sp.values()[i] - s.values()[src]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn jigsaw_head_equivariance_and_context_invariance() {
        let (net, params) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let small_q = random_tensor(&mut rng, 4, 32, 1.0);
        let small_c = random_tensor(&mut rng, 8, 32, 1.0);
        assert_eq!(net.head_jigsaw(&params, &small_q, &small_c).unwrap().len(), 4);
        for _ in 0..10 {
            let q = random_tensor(&mut rng, 16, 32, 1.0);
            let c = random_tensor(&mut rng, 32, 32, 1.0);
            let s = net.head_jigsaw(&params, &q, &c).unwrap();
            let pc = Permutation::random(32, &mut rng);
            let sc = net.head_jigsaw(&params, &q, &c.gather_rows(pc.order())).unwrap();
            for (a, b) in s.values().iter().zip(sc.values()) {
                assert!((a - b).abs() <= 1e-6);
            }
            let pq = Permutation::random(16, &mut rng);
            let sq = net.head_jigsaw(&params, &q.gather_rows(pq.order()), &c).unwrap();
            for (i, &src) in pq.order().iter().enumerate() {
                assert!((sq.values()[i] - s.values()[src]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = NetConfig {
            dim: 30,
            attn_heads: 4,
            ..NetConfig::default()
        };
        assert!(matches!(Network::new(bad), Err(Error::Config { .. })));
        let zero = NetConfig {
            patches: 0,
            ..NetConfig::default()
        };
        assert!(Network::new(zero).is_err());
    }
}
