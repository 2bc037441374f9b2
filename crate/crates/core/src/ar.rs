//! Causal autoregressive transformer over text-prefix + deep-token
//! sequences.
//!
//! A sequence is an 80-token text prefix followed, per frame, by a [BOV]
//! marker and the frame's N_q deep tokens. Every visual token carries two
//! learned positional embeddings (frame index and slot index; slot 0 is the
//! [BOV] marker). The model predicts the next deep token at every position
//! whose successor is a deep token, through a pluggable density head.

use crate::data::CAPTION_WORDS;
use crate::error::{Error, Result};
use crate::gmm::{self, HeadConfig, HeadKind};
use crate::nn::{Block, Embedding, Mlp3};
use crate::params::{normal_init, ParamId, ParamSet};
use crate::rng::Prng;
use crate::tensor::{Real, Tape, Tensor};
use crate::tokenizer::DeepTokenSet;

pub const TEXT_LEN: usize = 80;

/// Index arithmetic for the assembled context.
#[derive(Clone, Copy, Debug)]
pub struct SequenceLayout {
    pub text_len: usize,
    pub n_frames: usize,
    pub n_q: usize,
}

impl SequenceLayout {
    pub fn new(n_frames: usize, n_q: usize) -> Self {
        SequenceLayout { text_len: TEXT_LEN, n_frames, n_q }
    }

    pub fn total_len(&self) -> usize {
        self.text_len + (1 + self.n_q) * self.n_frames
    }

    pub fn bov_pos(&self, frame: usize) -> usize {
        self.text_len + frame * (1 + self.n_q)
    }

    pub fn token_pos(&self, frame: usize, slot: usize) -> usize {
        self.bov_pos(frame) + 1 + slot
    }

    /// Positions whose next token is a deep token, in (frame, slot) order:
    /// the predictor for token `(n, m)` sits one position before it.
    pub fn predictor_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_frames * self.n_q);
        for n in 0..self.n_frames {
            for m in 0..self.n_q {
                out.push(self.bov_pos(n) + m);
            }
        }
        out
    }
}

/// Whitespace tokenizer over the fixed caption vocabulary.
pub struct TextVocab {
    words: Vec<&'static str>,
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

impl Default for TextVocab {
    fn default() -> Self {
        let mut words = vec!["[pad]", "[unk]"];
        words.extend_from_slice(CAPTION_WORDS);
        TextVocab { words }
    }
}

impl TextVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|&w| w == word).unwrap_or(UNK_ID)
    }

    /// Pads or truncates to exactly `TEXT_LEN` ids.
    pub fn tokenize(&self, caption: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = caption
            .split_whitespace()
            .take(TEXT_LEN)
            .map(|w| self.id(w))
            .collect();
        ids.resize(TEXT_LEN, PAD_ID);
        ids
    }
}

pub fn text_tokenize(caption: &str) -> Vec<usize> {
    TextVocab::default().tokenize(caption)
}

#[derive(Clone, Copy, Debug)]
pub struct ArConfig {
    pub text_vocab: usize,
    pub token_dim: usize,
    pub n_queries: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub head: HeadConfig,
    /// Training-time probability of replacing a visual input token with the
    /// learned null embedding (its target remains).
    pub visual_drop: Real,
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head.dim != self.token_dim {
            return Err(Error::Config(format!(
                "head dim {} must equal token dim {}",
                self.head.dim, self.token_dim
            )));
        }
        if self.width == 0 || self.layers == 0 || self.heads == 0 || self.n_queries == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.visual_drop) {
            return Err(Error::Config("visual_drop must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One visual row of the assembled sequence.
pub enum VisRow<'a> {
    Bov { frame: usize },
    Token { frame: usize, slot: usize, values: &'a [Real], dropped: bool },
}

pub struct ArModel {
    pub cfg: ArConfig,
    pub text_embed: Embedding,
    pub text_pos: ParamId,
    pub bov: ParamId,
    pub null_vis: ParamId,
    pub frame_pos: ParamId,
    pub slot_pos: ParamId,
    pub input_mlp: Mlp3,
    pub blocks: Vec<Block>,
    pub norm: crate::nn::LayerNorm,
    pub out_mlp: Mlp3,
}

impl ArModel {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, cfg: ArConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(ps, rng, &format!("ar/block{i}"), w, cfg.heads, true, false))
            .collect::<Result<Vec<_>>>()?;
        let model = ArModel {
            text_embed: Embedding::new(ps, rng, "ar/text_embed", cfg.text_vocab, w)?,
            text_pos: ps.add("ar/text_pos", &[TEXT_LEN, w], normal_init(rng, TEXT_LEN * w, 0.02))?,
            bov: ps.add("ar/bov", &[1, w], normal_init(rng, w, 0.02))?,
            null_vis: ps.add("ar/null_vis", &[1, w], normal_init(rng, w, 0.02))?,
            frame_pos: ps.add("ar/frame_pos", &[cfg.max_frames, w], normal_init(rng, cfg.max_frames * w, 0.02))?,
            slot_pos: ps.add(
                "ar/slot_pos",
                &[cfg.n_queries + 1, w],
                normal_init(rng, (cfg.n_queries + 1) * w, 0.02),
            )?,
            input_mlp: Mlp3::new(ps, rng, "ar/input_mlp", cfg.token_dim, w, w)?,
            blocks,
            norm: crate::nn::LayerNorm::new(ps, "ar/norm", w)?,
            out_mlp: Mlp3::new(ps, rng, "ar/out_mlp", w, w, cfg.head.param_count())?,
            cfg,
        };
        // Start the head near zero output with unit variances: the variance
        // slice of the final bias is set so softplus(b) + floor = 1, and the
        // mean slices get small per-component noise. Without that noise the
        // mixture components are exactly symmetric, receive identical
        // gradients, and can never separate.
        model.out_mlp.zero_final(ps);
        if !matches!(cfg.head.kind, HeadKind::L2) {
            let (k, d) = (cfg.head.components(), cfg.head.dim);
            let unit_raw_var = ((1.0 - gmm::VAR_FLOOR) as f64).exp_m1().ln() as Real;
            if let Some(b) = model.out_mlp.l3.b {
                let bias = ps.value_mut(b);
                for v in bias[..k * d].iter_mut() {
                    *v = 0.1 * rng.normal();
                }
                for v in bias[k * d..2 * k * d].iter_mut() {
                    *v = unit_raw_var;
                }
            }
        }
        Ok(model)
    }

    /// Embeds one sequence (text prefix plus visual rows) to `[1, s, w]`.
    /// All token rows pass through the projection MLP in one batch; a single
    /// row gather then interleaves [BOV], dropped, and projected rows.
    pub fn embed_sequence(&self, t: &Tape, ps: &ParamSet, text_ids: &[usize], rows: &[VisRow]) -> Result<Tensor> {
        if text_ids.len() != TEXT_LEN {
            return Err(Error::shape("assemble", format!("text length {} vs {TEXT_LEN}", text_ids.len())));
        }
        if text_ids.iter().any(|&i| i >= self.cfg.text_vocab) {
            return Err(Error::invalid("assemble", "text id out of vocabulary"));
        }
        let w = self.cfg.width;
        let text = self.text_embed.forward(t, ps, text_ids)?;
        let text = t.add(text, t.param(ps, self.text_pos)?)?;

        if rows.is_empty() {
            return t.reshape(text, &[1, TEXT_LEN, w]);
        }

        // Gather-table: row 0 = [BOV], row 1 = null embedding, rows 2.. =
        // projected token values in appearance order.
        let mut token_values: Vec<Real> = Vec::new();
        let mut n_tokens = 0usize;
        for r in rows {
            if let VisRow::Token { values, frame, slot, .. } = r {
                if values.len() != self.cfg.token_dim {
                    return Err(Error::shape("assemble", "token dim mismatch"));
                }
                if *frame >= self.cfg.max_frames {
                    return Err(Error::invalid("assemble", format!("frame {frame} exceeds max_frames")));
                }
                if *slot >= self.cfg.n_queries {
                    return Err(Error::invalid("assemble", format!("slot {slot} out of range")));
                }
                token_values.extend_from_slice(values);
                n_tokens += 1;
            } else if let VisRow::Bov { frame } = r {
                if *frame >= self.cfg.max_frames {
                    return Err(Error::invalid("assemble", format!("frame {frame} exceeds max_frames")));
                }
            }
        }
        let projected = if n_tokens > 0 {
            let tokens = t.constant(&[n_tokens, self.cfg.token_dim], token_values)?;
            self.input_mlp.forward(t, ps, tokens)?
        } else {
            t.zeros_const(&[0usize.max(1), w])? // placeholder, never gathered
        };
        let table = t.concat(&[t.param(ps, self.bov)?, t.param(ps, self.null_vis)?, projected], 0)?;

        let mut gather_idx = Vec::with_capacity(rows.len());
        let mut frame_idx = Vec::with_capacity(rows.len());
        let mut slot_idx = Vec::with_capacity(rows.len());
        let mut next_token = 0usize;
        for r in rows {
            match r {
                VisRow::Bov { frame } => {
                    gather_idx.push(0);
                    frame_idx.push(*frame);
                    slot_idx.push(0);
                }
                VisRow::Token { frame, slot, dropped, .. } => {
                    gather_idx.push(if *dropped { 1 } else { 2 + next_token });
                    next_token += 1;
                    frame_idx.push(*frame);
                    slot_idx.push(slot + 1);
                }
            }
        }
        let base = t.gather_rows(table, &gather_idx)?;
        let pos = t.add(
            t.gather_rows(t.param(ps, self.frame_pos)?, &frame_idx)?,
            t.gather_rows(t.param(ps, self.slot_pos)?, &slot_idx)?,
        )?;
        let visual = t.add(base, pos)?;
        let seq = t.concat(&[text, visual], 0)?;
        let s = TEXT_LEN + rows.len();
        t.reshape(seq, &[1, s, w])
    }

    /// Causal transformer over an embedded `[b, s, w]` sequence.
    pub fn forward_hidden(&self, t: &Tape, ps: &ParamSet, seq: Tensor) -> Result<Tensor> {
        let mut x = seq;
        for blk in &self.blocks {
            x = blk.forward(t, ps, x, None)?;
        }
        self.norm.forward(t, ps, x)
    }

    /// Raw head outputs at the given positions of a `[b, s, w]` hidden
    /// state, flattened to `[b * positions, head width]`.
    pub fn head_raw_at(&self, t: &Tape, ps: &ParamSet, hidden: Tensor, positions: &[usize]) -> Result<Tensor> {
        let hs = t.shape_of(hidden);
        let (b, s, w) = (hs[0], hs[1], hs[2]);
        let flat = t.reshape(hidden, &[b * s, w])?;
        let mut idx = Vec::with_capacity(b * positions.len());
        for bi in 0..b {
            for &p in positions {
                idx.push(bi * s + p);
            }
        }
        let rows = t.gather_rows(flat, &idx)?;
        self.out_mlp.forward(t, ps, rows)
    }
}

/// A teacher-forcing batch: equal-length token-set sequences plus text.
pub struct ArBatch {
    pub text_ids: Vec<Vec<usize>>,
    /// `batch x n_frames` token sets.
    pub sequences: Vec<Vec<DeepTokenSet>>,
    /// Per (batch, frame, slot) input-drop flags.
    pub drop: Vec<Vec<bool>>,
}

impl ArBatch {
    pub fn n_frames(&self) -> usize {
        self.sequences.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn validate(&self, cfg: &ArConfig) -> Result<()> {
        let b = self.text_ids.len();
        if self.sequences.len() != b || self.drop.len() != b {
            return Err(Error::shape("ar_batch", "field lengths differ"));
        }
        let n = self.n_frames();
        for (seq, drop) in self.sequences.iter().zip(self.drop.iter()) {
            if seq.len() != n {
                return Err(Error::shape("ar_batch", "ragged frame counts"));
            }
            if drop.len() != n * cfg.n_queries {
                return Err(Error::shape("ar_batch", "drop mask length"));
            }
            for ts in seq {
                if ts.n_q != cfg.n_queries || ts.c != cfg.token_dim {
                    return Err(Error::shape("ar_batch", "token set dims"));
                }
            }
        }
        if n > cfg.max_frames {
            return Err(Error::invalid("ar_batch", format!("{n} frames exceed max_frames {}", cfg.max_frames)));
        }
        Ok(())
    }

    /// Samples the 5% visual-token drop for a batch.
    pub fn sample_drop(b: usize, n_frames: usize, n_q: usize, rate: Real, rng: &mut Prng) -> Vec<Vec<bool>> {
        (0..b)
            .map(|_| (0..n_frames * n_q).map(|_| rng.bernoulli(rate)).collect())
            .collect()
    }
}

fn rows_for_sequence<'a>(seq: &'a [DeepTokenSet], drop: &[bool], n_q: usize) -> Vec<VisRow<'a>> {
    let mut rows = Vec::with_capacity(seq.len() * (1 + n_q));
    for (n, ts) in seq.iter().enumerate() {
        rows.push(VisRow::Bov { frame: n });
        for m in 0..n_q {
            rows.push(VisRow::Token {
                frame: n,
                slot: m,
                values: &ts.tokens[m * ts.c..(m + 1) * ts.c],
                dropped: drop[n * n_q + m],
            });
        }
    }
    rows
}

/// Embeds a whole batch (teacher forcing) to `[b, s, w]`.
pub fn assemble(model: &ArModel, t: &Tape, ps: &ParamSet, batch: &ArBatch) -> Result<Tensor> {
    batch.validate(&model.cfg)?;
    let mut parts = Vec::with_capacity(batch.text_ids.len());
    for (i, seq) in batch.sequences.iter().enumerate() {
        let rows = rows_for_sequence(seq, &batch.drop[i], model.cfg.n_queries);
        parts.push(model.embed_sequence(t, ps, &batch.text_ids[i], &rows)?);
    }
    t.concat(&parts, 0)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LossMode {
    /// The configured head's likelihood (or MSE for an L2 head).
    Standard,
    /// Mean squared error of all component means against the target; used
    /// for the first half of the image stage.
    L2Warmup,
}

/// Teacher-forced loss over every visual-predicting position.
pub fn nll_step(model: &ArModel, t: &Tape, ps: &ParamSet, batch: &ArBatch, mode: LossMode) -> Result<Tensor> {
    let seq = assemble(model, t, ps, batch)?;
    let hidden = model.forward_hidden(t, ps, seq)?;
    let layout = SequenceLayout::new(batch.n_frames(), model.cfg.n_queries);
    let positions = layout.predictor_positions();
    let raw = model.head_raw_at(t, ps, hidden, &positions)?;

    let mut target_vals = Vec::new();
    for seq in &batch.sequences {
        for ts in seq {
            target_vals.extend_from_slice(&ts.tokens);
        }
    }
    let p = batch.text_ids.len() * positions.len();
    let targets = t.constant(&[p, model.cfg.token_dim], target_vals)?;
    match mode {
        LossMode::Standard => gmm::head_loss(t, raw, targets, &model.cfg.head),
        LossMode::L2Warmup => gmm::head_l2_warmup_loss(t, raw, targets, &model.cfg.head),
    }
}

pub struct GenerationTrace {
    pub token_sets: Vec<DeepTokenSet>,
    /// Raw head output for every sampled token, in sampling order.
    pub raws: Vec<Vec<Real>>,
}

/// Sequential generation: emits [BOV] then N_q tokens per frame, feeding
/// each sampled token back as input. Deterministic given the seed.
pub fn generate(
    model: &ArModel,
    ps: &ParamSet,
    text_ids: &[usize],
    n_frames: usize,
    seed: u64,
) -> Result<Vec<DeepTokenSet>> {
    Ok(generate_traced(model, ps, text_ids, n_frames, seed)?.token_sets)
}

pub fn generate_traced(
    model: &ArModel,
    ps: &ParamSet,
    text_ids: &[usize],
    n_frames: usize,
    seed: u64,
) -> Result<GenerationTrace> {
    let cfg = &model.cfg;
    if n_frames == 0 || n_frames > cfg.max_frames {
        return Err(Error::invalid("generate", format!("n_frames {n_frames} outside 1..={}", cfg.max_frames)));
    }
    let n_q = cfg.n_queries;
    let d = cfg.token_dim;
    let mut tokens: Vec<Vec<Real>> = Vec::new(); // flat per generated token
    let mut raws = Vec::new();
    let mut step = 0u64;
    for frame in 0..n_frames {
        for slot in 0..n_q {
            // Rebuild the prefix: all complete tokens so far plus the
            // current frame's [BOV].
            let t = Tape::new();
            let mut rows: Vec<VisRow> = Vec::new();
            for (i, tok) in tokens.iter().enumerate() {
                let (fr, sl) = (i / n_q, i % n_q);
                if sl == 0 {
                    rows.push(VisRow::Bov { frame: fr });
                }
                rows.push(VisRow::Token { frame: fr, slot: sl, values: tok, dropped: false });
            }
            if slot == 0 {
                rows.push(VisRow::Bov { frame });
            }
            let seq = model.embed_sequence(&t, ps, text_ids, &rows)?;
            let hidden = model.forward_hidden(&t, ps, seq)?;
            let s = TEXT_LEN + rows.len();
            let raw = model.head_raw_at(&t, ps, hidden, &[s - 1])?;
            let raw_vals = t.data(raw);
            let mut rng = Prng::for_purpose(seed, "ar-generate", step);
            step += 1;
            let sample = match cfg.head.kind {
                HeadKind::L2 => raw_vals.clone(),
                _ => {
                    let params = gmm::raw_to_params(&raw_vals, &cfg.head)?;
                    gmm::sample_infer(&params, &mut rng)
                }
            };
            raws.push(raw_vals);
            tokens.push(sample);
            let _ = slot;
        }
    }
    let token_sets = (0..n_frames)
        .map(|frame| {
            let mut vals = Vec::with_capacity(n_q * d);
            for m in 0..n_q {
                vals.extend_from_slice(&tokens[frame * n_q + m]);
            }
            DeepTokenSet { frame_index: frame, tokens: vals, n_q, c: d }
        })
        .collect();
    Ok(GenerationTrace { token_sets, raws })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};

    fn tiny_cfg() -> ArConfig {
        ArConfig {
            text_vocab: TextVocab::default().len(),
            token_dim: 2,
            n_queries: 2,
            width: 16,
            layers: 2,
            heads: 2,
            max_frames: 4,
            head: HeadConfig::new(HeadKind::Gmm, 2, 2),
            visual_drop: 0.05,
        }
    }

    fn tiny_model(seed: u64) -> (ParamSet, ArModel) {
        let mut ps = ParamSet::new();
        let mut rng = Prng::seeded(seed);
        let model = ArModel::new(&mut ps, &mut rng, tiny_cfg()).unwrap();
        (ps, model)
    }

    /// The head's final projection starts at zero, which makes every
    /// upstream gradient exactly zero; tests that need gradient flow move it
    /// off zero first.
    fn unzero_head(ps: &mut ParamSet, model: &ArModel, seed: u64) {
        let mut rng = Prng::seeded(seed);
        for v in ps.value_mut(model.out_mlp.l3.w).iter_mut() {
            *v = 0.05 * rng.normal();
        }
    }

    fn random_batch(model: &ArModel, b: usize, n_frames: usize, seed: u64, drop: bool) -> ArBatch {
        let cfg = &model.cfg;
        let mut rng = Prng::seeded(seed);
        let text_ids = (0..b).map(|_| text_tokenize("circle moving right quickly")).collect();
        let sequences = (0..b)
            .map(|_| {
                (0..n_frames)
                    .map(|f| DeepTokenSet {
                        frame_index: f,
                        tokens: rng.normal_vec(cfg.n_queries * cfg.token_dim),
                        n_q: cfg.n_queries,
                        c: cfg.token_dim,
                    })
                    .collect()
            })
            .collect();
        let drop = if drop {
            let mut r = Prng::seeded(seed + 1);
            ArBatch::sample_drop(b, n_frames, cfg.n_queries, 0.05, &mut r)
        } else {
            vec![vec![false; n_frames * cfg.n_queries]; b]
        };
        ArBatch { text_ids, sequences, drop }
    }

    #[test]
    fn layout_formulas() {
        // Paper-scale: 80 + (1 + 16) * 16 = 352.
        let l = SequenceLayout::new(16, 16);
        assert_eq!(l.total_len(), 352);

        // One frame: 97 positions, single BOV at 80.
        let l = SequenceLayout::new(1, 16);
        assert_eq!(l.total_len(), 97);
        assert_eq!(l.bov_pos(0), 80);

        // Closed forms for random sizes.
        let mut rng = Prng::seeded(2);
        for _ in 0..50 {
            let n_frames = 1 + rng.below(12);
            let n_q = 1 + rng.below(24);
            let l = SequenceLayout::new(n_frames, n_q);
            assert_eq!(l.total_len(), 80 + (1 + n_q) * n_frames);
            for n in 0..n_frames {
                assert_eq!(l.bov_pos(n), 80 + n * (1 + n_q));
                for m in 0..n_q {
                    assert_eq!(l.token_pos(n, m), 80 + n * (1 + n_q) + 1 + m);
                }
            }
            // The predictor for token (n, 0) is the [BOV] of frame n.
            let preds = l.predictor_positions();
            for n in 0..n_frames {
                assert_eq!(preds[n * n_q], l.bov_pos(n));
            }
        }
    }

    #[test]
    fn text_tokenize_pads_and_truncates() {
        let empty = text_tokenize("");
        assert_eq!(empty.len(), 80);
        assert!(empty.iter().all(|&i| i == PAD_ID));

        let three = text_tokenize("circle moving right");
        assert_eq!(three.len(), 80);
        assert!(three[..3].iter().all(|&i| i != PAD_ID && i != UNK_ID));
        assert!(three[3..].iter().all(|&i| i == PAD_ID));

        let long = vec!["circle"; 100].join(" ");
        let ids = text_tokenize(&long);
        assert_eq!(ids.len(), 80);
        assert!(ids.iter().all(|&i| i != PAD_ID));

        assert_eq!(text_tokenize("walrus")[0], UNK_ID);
    }

    #[test]
    fn causality_is_bit_exact() {
        let (ps, model) = tiny_model(3);
        let batch = random_batch(&model, 1, 3, 7, false);
        let t = Tape::new();
        let seq = assemble(&model, &t, &ps, &batch).unwrap();
        let hidden = model.forward_hidden(&t, &ps, seq).unwrap();
        let base = t.data(hidden);

        // Perturb the last deep token of the last frame.
        let mut perturbed = random_batch(&model, 1, 3, 7, false);
        let last = perturbed.sequences[0].last_mut().unwrap();
        let c = last.c;
        let n_q = last.n_q;
        last.tokens[(n_q - 1) * c] += 10.0;
        let t2 = Tape::new();
        let seq2 = assemble(&model, &t2, &ps, &perturbed).unwrap();
        let hidden2 = model.forward_hidden(&t2, &ps, seq2).unwrap();
        let after = t2.data(hidden2);

        let layout = SequenceLayout::new(3, model.cfg.n_queries);
        let w = model.cfg.width;
        let changed_pos = layout.token_pos(2, model.cfg.n_queries - 1);
        for p in 0..layout.total_len() {
            let same = base[p * w..(p + 1) * w] == after[p * w..(p + 1) * w];
            if p < changed_pos {
                assert!(same, "position {p} changed");
            }
            if p == changed_pos {
                assert!(!same, "perturbed position must change");
            }
        }
    }

    #[test]
    fn dropped_tokens_use_null_embedding_but_keep_targets() {
        let (mut ps, model) = tiny_model(5);
        unzero_head(&mut ps, &model, 500);
        let mut batch = random_batch(&model, 1, 2, 9, false);
        batch.drop[0][1] = true;

        let t = Tape::new();
        let loss = nll_step(&model, &t, &ps, &batch, LossMode::Standard).unwrap();
        t.backward(loss).unwrap();
        // Gradient reaches the null embedding (used as input)...
        let g = t.param_grad(model.null_vis).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        // ...while the total number of predicted targets is unchanged: the
        // loss still covers every (frame, slot) pair.
        let layout = SequenceLayout::new(2, model.cfg.n_queries);
        assert_eq!(layout.predictor_positions().len(), 4);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (mut ps, model) = tiny_model(11);
        unzero_head(&mut ps, &model, 1100);
        let batch = random_batch(&model, 1, 2, 13, true);
        let ids = ps.ids();
        let report = check_gradients(&mut ps, &ids, &GradCheckOptions::default(), |t, ps| {
            nll_step(&model, t, ps, &batch, LossMode::Standard)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn teacher_forced_loss_is_batch_order_invariant() {
        let (ps, model) = tiny_model(17);
        let mut batch = random_batch(&model, 3, 2, 19, false);
        let t = Tape::new();
        let a = t.scalar(nll_step(&model, &t, &ps, &batch, LossMode::Standard).unwrap()).unwrap();

        batch.text_ids.rotate_left(1);
        batch.sequences.rotate_left(1);
        batch.drop.rotate_left(1);
        let t2 = Tape::new();
        let b = t2.scalar(nll_step(&model, &t2, &ps, &batch, LossMode::Standard).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn initial_loss_matches_unit_gaussian_estimate() {
        // Standardized targets, zero-init head with unit variances: the NLL
        // per token is about d * (ln(2 pi) / 2 + 1/2).
        let (ps, model) = tiny_model(23);
        let batch = random_batch(&model, 4, 3, 29, false);
        let t = Tape::new();
        let loss = t.scalar(nll_step(&model, &t, &ps, &batch, LossMode::Standard).unwrap()).unwrap();
        let d = model.cfg.token_dim as Real;
        let estimate = d * (0.5 * crate::tensor::LN_2PI + 0.5);
        assert!(
            (loss - estimate).abs() < 0.2 * estimate,
            "loss {loss} vs estimate {estimate}"
        );
    }

    #[test]
    fn generate_shapes_and_determinism() {
        let (ps, model) = tiny_model(31);
        let ids = text_tokenize("square moving left slowly");
        let a = generate(&model, &ps, &ids, 1, 7).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].n_q, a[0].c), (2, 2));

        let b = generate(&model, &ps, &ids, 3, 7).unwrap();
        let c = generate(&model, &ps, &ids, 3, 7).unwrap();
        assert_eq!(b.len(), 3);
        for (x, y) in b.iter().zip(c.iter()) {
            assert_eq!(x.tokens, y.tokens);
        }
        let d = generate(&model, &ps, &ids, 3, 8).unwrap();
        assert!(b.iter().zip(d.iter()).any(|(x, y)| x.tokens != y.tokens));

        assert!(generate(&model, &ps, &ids, 5, 7).is_err(), "max_frames is 4");
    }

    #[test]
    fn replaying_a_generated_sequence_reproduces_its_distributions() {
        let (ps, model) = tiny_model(37);
        let ids = text_tokenize("circle moving down quickly");
        let trace = generate_traced(&model, &ps, &ids, 2, 11).unwrap();

        // Teacher-forced pass over the generated tokens, no drop.
        let batch = ArBatch {
            text_ids: vec![ids.clone()],
            sequences: vec![trace.token_sets.clone()],
            drop: vec![vec![false; 2 * model.cfg.n_queries]],
        };
        let t = Tape::new();
        let seq = assemble(&model, &t, &ps, &batch).unwrap();
        let hidden = model.forward_hidden(&t, &ps, seq).unwrap();
        let layout = SequenceLayout::new(2, model.cfg.n_queries);
        let raw = model.head_raw_at(&t, &ps, hidden, &layout.predictor_positions()).unwrap();
        let replayed = t.data(raw);
        let width = model.cfg.head.param_count();
        for (i, step_raw) in trace.raws.iter().enumerate() {
            assert_eq!(
                &replayed[i * width..(i + 1) * width],
                step_raw.as_slice(),
                "distribution at step {i} differs"
            );
        }
    }
}
