//! Frame tokenizer: temporal subsampling, a per-frame patch-transformer
//! encoder, and a query transformer that compresses N patch features into
//! N_q continuous deep tokens.
//!
//! Encoding is strictly frame-local: the deep tokens of frame t are a pure
//! function of frame t and the weights, which is what lets an autoregressive
//! model consume them in temporal order.

use crate::error::{Error, Result};
use crate::nn::{Block, Linear};
use crate::params::{normal_init, ParamId, ParamSet};
use crate::rng::Prng;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct TokenizerConfig {
    pub frame_size: usize,
    pub patch: usize,
    pub channels: usize,
    /// Channel dim C shared by features and deep tokens.
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    /// N_q deep tokens per kept frame.
    pub n_queries: usize,
    pub query_layers: usize,
    pub query_heads: usize,
    /// Add learned per-patch positions to features inside the compressor.
    pub feat_pos: bool,
    /// Train the frame encoder jointly (default) or freeze it so only the
    /// query transformer adapts.
    pub freeze_encoder: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            frame_size: 32,
            patch: 8,
            channels: 1,
            feat_dim: 64,
            enc_layers: 2,
            enc_heads: 4,
            n_queries: 16,
            query_layers: 2,
            query_heads: 4,
            feat_pos: true,
            freeze_encoder: false,
        }
    }
}

impl TokenizerConfig {
    pub fn n_patches(&self) -> usize {
        let side = self.frame_size / self.patch;
        side * side
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.patch == 0 || self.frame_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame size {} must be a positive multiple of patch {}",
                self.frame_size, self.patch
            )));
        }
        if self.n_queries == 0 || self.feat_dim == 0 || self.enc_layers == 0 || self.query_layers == 0 {
            return Err(Error::Config("tokenizer dims must be positive".into()));
        }
        if self.enc_heads == 0 || self.query_heads == 0 {
            return Err(Error::Config("head counts must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame patch features `Z_t`.
pub struct FrameFeatures {
    pub frame_index: usize,
    /// Row-major `[n, c]`.
    pub features: Vec<Real>,
    pub n: usize,
    pub c: usize,
}

/// The N_q x C continuous tokens for one kept frame.
#[derive(Clone, Debug)]
pub struct DeepTokenSet {
    pub frame_index: usize,
    /// Row-major `[n_q, c]`.
    pub tokens: Vec<Real>,
    pub n_q: usize,
    pub c: usize,
}

impl DeepTokenSet {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.n_q * self.c {
            return Err(Error::shape("deep_token_set", "tokens length vs n_q x c"));
        }
        if self.tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "deep_token_set" });
        }
        Ok(())
    }
}

/// Keeps frames `0, stride, 2*stride, ...`; the kept count is
/// `floor((len - 1) / stride) + 1`.
pub fn subsample_indices(len: usize, stride: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Data("cannot subsample an empty video".into()));
    }
    if stride == 0 {
        return Err(Error::invalid("subsample", "stride must be >= 1"));
    }
    Ok((0..len).step_by(stride).collect())
}

pub fn subsample<T: Clone>(video: &[T], stride: usize) -> Result<Vec<T>> {
    Ok(subsample_indices(video.len(), stride)?
        .into_iter()
        .map(|i| video[i].clone())
        .collect())
}

/// Patch-embedding transformer standing in for a large pretrained image
/// encoder; same role, desk scale.
pub struct FrameEncoder {
    pub patch_embed: Linear,
    pub patch_pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: crate::nn::LayerNorm,
    pub proj: Linear,
}

impl FrameEncoder {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, cfg: &TokenizerConfig) -> Result<Self> {
        let c = cfg.feat_dim;
        let n = cfg.n_patches();
        let blocks = (0..cfg.enc_layers)
            .map(|i| Block::new(ps, rng, &format!("enc/block{i}"), c, cfg.enc_heads, false, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameEncoder {
            patch_embed: Linear::new(ps, rng, "enc/patch_embed", cfg.patch_pixels(), c)?,
            patch_pos: ps.add("enc/patch_pos", &[n, c], normal_init(rng, n * c, 0.02))?,
            blocks,
            norm: crate::nn::LayerNorm::new(ps, "enc/norm", c)?,
            proj: Linear::new(ps, rng, "enc/proj", c, c)?,
        })
    }

    /// `[b, n, patch_pixels]` patches to `[b, n, c]` features.
    pub fn forward(&self, t: &Tape, ps: &ParamSet, patches: Tensor) -> Result<Tensor> {
        let mut x = self.patch_embed.forward(t, ps, patches)?;
        x = t.add(x, t.param(ps, self.patch_pos)?)?;
        for b in &self.blocks {
            x = b.forward(t, ps, x, None)?;
        }
        x = self.norm.forward(t, ps, x)?;
        self.proj.forward(t, ps, x)
    }
}

/// Query transformer: learned queries concatenated with frame features run
/// through bidirectional self-attention; the query positions are the output.
pub struct QueryCompressor {
    pub bank: ParamId,
    pub slot_pos: ParamId,
    pub feat_pos: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub norm: crate::nn::LayerNorm,
}

impl QueryCompressor {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, cfg: &TokenizerConfig) -> Result<Self> {
        let c = cfg.feat_dim;
        let nq = cfg.n_queries;
        let n = cfg.n_patches();
        let blocks = (0..cfg.query_layers)
            .map(|i| Block::new(ps, rng, &format!("query/block{i}"), c, cfg.query_heads, false, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(QueryCompressor {
            bank: ps.add("query/bank", &[nq, c], normal_init(rng, nq * c, 0.02))?,
            slot_pos: ps.add("query/slot_pos", &[nq, c], normal_init(rng, nq * c, 0.02))?,
            feat_pos: if cfg.feat_pos {
                Some(ps.add("query/feat_pos", &[n, c], normal_init(rng, n * c, 0.02))?)
            } else {
                None
            },
            blocks,
            norm: crate::nn::LayerNorm::new(ps, "query/norm", c)?,
        })
    }

    /// `[b, n, c]` features to `[b, n_q, c]` deep tokens.
    pub fn forward(&self, t: &Tape, ps: &ParamSet, features: Tensor) -> Result<Tensor> {
        let fs = t.shape_of(features);
        if fs.len() != 3 {
            return Err(Error::shape("compress", format!("features must be [b, n, c], got {:?}", fs)));
        }
        let (b, _, c) = (fs[0], fs[1], fs[2]);
        let bank_shape = t.shape_of(t.param(ps, self.bank)?);
        if bank_shape[1] != c {
            return Err(Error::shape(
                "compress",
                format!("feature channels {c} vs query channels {}", bank_shape[1]),
            ));
        }
        let nq = bank_shape[0];
        let q = t.add(t.param(ps, self.bank)?, t.param(ps, self.slot_pos)?)?;
        // Broadcast the shared queries across the batch.
        let qb = t.add(q, t.zeros_const(&[b, 1, 1])?)?;
        let f = match self.feat_pos {
            Some(p) => t.add(features, t.param(ps, p)?)?,
            None => features,
        };
        let mut x = t.concat(&[qb, f], 1)?;
        for blk in &self.blocks {
            x = blk.forward(t, ps, x, None)?;
        }
        x = self.norm.forward(t, ps, x)?;
        t.slice(x, 1, 0, nq)
    }
}

pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub encoder: FrameEncoder,
    pub compressor: QueryCompressor,
}

impl Tokenizer {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Tokenizer {
            encoder: FrameEncoder::new(ps, rng, &cfg)?,
            compressor: QueryCompressor::new(ps, rng, &cfg)?,
            cfg,
        })
    }

    /// Splits a `[h, w]` frame into row-major patch rows.
    pub fn patchify(&self, frame: &[Real]) -> Result<Vec<Real>> {
        let (hw, p) = (self.cfg.frame_size, self.cfg.patch);
        if frame.len() != hw * hw * self.cfg.channels {
            return Err(Error::shape(
                "patchify",
                format!("frame has {} values, config wants {}", frame.len(), hw * hw * self.cfg.channels),
            ));
        }
        let side = hw / p;
        let mut out = Vec::with_capacity(frame.len());
        for pi in 0..side {
            for pj in 0..side {
                for r in 0..p {
                    let row = pi * p + r;
                    let col = pj * p;
                    out.extend_from_slice(&frame[row * hw + col..row * hw + col + p]);
                }
            }
        }
        Ok(out)
    }

    /// Differentiable path: frames (each `h*w` values) to `[b, n_q, c]`
    /// deep tokens on the given tape. With a frozen encoder the features are
    /// computed off-tape and enter as constants.
    pub fn encode_frames(&self, t: &Tape, ps: &ParamSet, frames: &[&[Real]]) -> Result<Tensor> {
        let b = frames.len();
        let n = self.cfg.n_patches();
        let pp = self.cfg.patch_pixels();
        let mut patch_data = Vec::with_capacity(b * n * pp);
        for f in frames {
            patch_data.extend(self.patchify(f)?);
        }
        let features = if self.cfg.freeze_encoder {
            let inner = Tape::new();
            let patches = inner.constant(&[b, n, pp], patch_data)?;
            let feats = self.encoder.forward(&inner, ps, patches)?;
            t.constant(&[b, n, self.cfg.feat_dim], inner.data(feats))?
        } else {
            let patches = t.constant(&[b, n, pp], patch_data)?;
            self.encoder.forward(t, ps, patches)?
        };
        self.compressor.forward(t, ps, features)
    }

    /// Inference wrapper producing a value-level feature set for one frame.
    pub fn encode_frame(&self, ps: &ParamSet, frame: &[Real], frame_index: usize) -> Result<FrameFeatures> {
        let t = Tape::new();
        let patches = t.constant(&[1, self.cfg.n_patches(), self.cfg.patch_pixels()], self.patchify(frame)?)?;
        let feats = self.encoder.forward(&t, ps, patches)?;
        Ok(FrameFeatures {
            frame_index,
            features: t.data(feats),
            n: self.cfg.n_patches(),
            c: self.cfg.feat_dim,
        })
    }

    /// Inference wrapper: frame to deep tokens.
    pub fn tokenize_frame(&self, ps: &ParamSet, frame: &[Real], frame_index: usize) -> Result<DeepTokenSet> {
        let t = Tape::new();
        let tokens = self.encode_frames(&t, ps, &[frame])?;
        Ok(DeepTokenSet {
            frame_index,
            tokens: t.data(tokens),
            n_q: self.cfg.n_queries,
            c: self.cfg.feat_dim,
        })
    }

    /// Compress pre-computed features (spec surface for the query
    /// transformer alone).
    pub fn compress(&self, ps: &ParamSet, features: &FrameFeatures) -> Result<DeepTokenSet> {
        let t = Tape::new();
        let f = t.constant(&[1, features.n, features.c], features.features.clone())?;
        let tokens = self.compressor.forward(&t, ps, f)?;
        Ok(DeepTokenSet {
            frame_index: features.frame_index,
            tokens: t.data(tokens),
            n_q: self.cfg.n_queries,
            c: self.cfg.feat_dim,
        })
    }
}

/// Replaces the first `count` token vectors with zeros (token-ablation
/// study).
pub fn zero_out(tokens: &DeepTokenSet, count: usize) -> Result<DeepTokenSet> {
    if count > tokens.n_q {
        return Err(Error::invalid("zero_out", format!("count {count} > n_q {}", tokens.n_q)));
    }
    let mut out = tokens.clone();
    for v in out.tokens[..count * tokens.c].iter_mut() {
        *v = 0.0;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionReport {
    pub low_level_tokens: usize,
    pub deep_tokens: usize,
    pub ratio: Real,
}

/// Token-budget arithmetic for a clip: `frames x low-level tokens per frame`
/// against the `n_q` deep tokens that condition its reconstruction.
pub fn compression_report(frames: usize, low_level_per_frame: usize, n_q: usize) -> CompressionReport {
    let low = frames * low_level_per_frame;
    CompressionReport {
        low_level_tokens: low,
        deep_tokens: n_q,
        ratio: low as Real / n_q as Real,
    }
}
