//! Training orchestration: the tokenizer/decoder joint run and the
//! three-stage autoregressive run (image, mixed, motion-filtered), with
//! deterministic per-step randomness, append-only metrics, and resumable
//! checkpoints.
//!
//! Every stochastic choice of step `s` is drawn from a stream derived from
//! `(seed, purpose, s)`, so resuming from a checkpoint at step `s` replays
//! the exact continuation of an uninterrupted run.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::ar::{self, ArBatch, ArConfig, ArModel, LossMode, TextVocab};
use crate::checkpoint::Archive;
use crate::config::PipelineConfig;
use crate::data::{filter_by_motion, percentile, ClipData, Corpus};
use crate::diffusion::{diffusion_loss, Denoiser, DenoiserConfig, NoiseSchedule, PredictTarget};
use crate::error::{Error, Result};
use crate::eval::held_out_loss;
use crate::gmm::HeadKind;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::params::ParamSet;
use crate::rng::Prng;
use crate::tensor::{Real, Tape};
use crate::tokenizer::{subsample_indices, DeepTokenSet, Tokenizer, TokenizerConfig};

/// Tokenizer, query transformer, and denoiser share one parameter set and
/// train jointly on the denoising loss.
pub struct TokenizerBundle {
    pub params: ParamSet,
    pub tokenizer: Tokenizer,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl TokenizerBundle {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = Prng::for_purpose(cfg.seed, "tokenizer-init", 0);
        let tok_cfg = TokenizerConfig {
            frame_size: cfg.frame_size,
            patch: cfg.patch,
            feat_dim: cfg.token_dim,
            n_queries: cfg.n_queries,
            enc_layers: cfg.enc_layers,
            query_layers: cfg.query_layers,
            ..TokenizerConfig::default()
        };
        let tokenizer = Tokenizer::new(&mut params, &mut rng, tok_cfg)?;
        let den_cfg = DenoiserConfig {
            frame_size: cfg.frame_size,
            patch: cfg.patch,
            clip_len: cfg.stride,
            width: cfg.den_width,
            layers: cfg.den_layers,
            heads: cfg.den_heads,
            token_dim: cfg.token_dim,
            n_queries: cfg.n_queries,
            cond_drop: cfg.cond_drop,
            target: PredictTarget::V,
            ..DenoiserConfig::default()
        };
        let denoiser = Denoiser::new(&mut params, &mut rng, den_cfg)?;
        let schedule = NoiseSchedule::linear(cfg.schedule_steps, 1e-4 as Real, 0.02 as Real)?;
        Ok(TokenizerBundle { params, tokenizer, denoiser, schedule })
    }

    pub fn save(&self, path: &Path, opt: Option<&AdamW>, step: u64) -> Result<()> {
        let mut archive = Archive::from_params(&self.params);
        archive.push("meta/step", &[1], vec![step as Real]);
        if let Some(opt) = opt {
            opt.save_state(&self.params, &mut archive);
        }
        archive.save(path)
    }

    /// Loads weights into a freshly built bundle; returns the raw archive so
    /// callers can also restore optimizer state.
    pub fn load(cfg: &PipelineConfig, path: &Path) -> Result<(Self, Archive)> {
        let mut bundle = TokenizerBundle::new(cfg)?;
        let archive = Archive::load(path)?;
        archive.load_into(&mut bundle.params)?;
        Ok((bundle, archive))
    }

    /// Deep tokens for a batch of frames on a throwaway tape.
    pub fn tokenize_frames(&self, frames: &[&[Real]]) -> Result<Vec<DeepTokenSet>> {
        let t = Tape::new();
        let tokens = self.tokenizer.encode_frames(&t, &self.params, frames)?;
        let vals = t.data(tokens);
        let (nq, c) = (self.tokenizer.cfg.n_queries, self.tokenizer.cfg.feat_dim);
        Ok((0..frames.len())
            .map(|i| DeepTokenSet {
                frame_index: i,
                tokens: vals[i * nq * c..(i + 1) * nq * c].to_vec(),
                n_q: nq,
                c,
            })
            .collect())
    }
}

pub fn archive_step(archive: &Archive) -> u64 {
    archive.get("meta/step").map(|(_, v)| v[0] as u64).unwrap_or(0)
}

pub struct ArBundle {
    pub params: ParamSet,
    pub model: ArModel,
}

impl ArBundle {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = Prng::for_purpose(cfg.seed, "ar-init", 0);
        let (width, layers, heads) = cfg.preset.ar_dims();
        let ar_cfg = ArConfig {
            text_vocab: TextVocab::default().len(),
            token_dim: cfg.token_dim,
            n_queries: cfg.n_queries,
            width,
            layers,
            heads,
            max_frames: cfg.max_frames,
            head: cfg.head(),
            visual_drop: cfg.visual_drop,
        };
        let model = ArModel::new(&mut params, &mut rng, ar_cfg)?;
        Ok(ArBundle { params, model })
    }

    pub fn save(&self, path: &Path, opt: Option<&AdamW>, step: u64) -> Result<()> {
        let mut archive = Archive::from_params(&self.params);
        archive.push("meta/step", &[1], vec![step as Real]);
        if let Some(opt) = opt {
            opt.save_state(&self.params, &mut archive);
        }
        archive.save(path)
    }

    pub fn load(cfg: &PipelineConfig, path: &Path) -> Result<(Self, Archive)> {
        let mut bundle = ArBundle::new(cfg)?;
        let archive = Archive::load(path)?;
        archive.load_into(&mut bundle.params)?;
        Ok((bundle, archive))
    }
}

/// Append-only metrics file: `step,stage,loss,lr,eval_nll` with the eval
/// column filled only at stage boundaries. Wall-clock timings go to the run
/// log, never into the CSV, so repeated runs are byte-identical.
pub struct MetricsWriter {
    file: fs::File,
    pub path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = fs::File::create(path)?;
        writeln!(file, "step,stage,loss,lr,eval_nll")?;
        Ok(MetricsWriter { file, path: path.to_path_buf() })
    }

    pub fn row(&mut self, step: u64, stage: &str, loss: Real, lr: Real, eval_nll: Option<Real>) -> Result<()> {
        match eval_nll {
            Some(e) => writeln!(self.file, "{step},{stage},{loss},{lr},{e}")?,
            None => writeln!(self.file, "{step},{stage},{loss},{lr},")?,
        }
        Ok(())
    }
}

fn smoothed(losses: &[Real], window: usize) -> (Real, Real) {
    let w = window.min(losses.len()).max(1);
    let first: Real = losses[..w].iter().sum::<Real>() / w as Real;
    let last: Real = losses[losses.len() - w..].iter().sum::<Real>() / w as Real;
    (first, last)
}

pub struct TrainReport {
    pub steps: u64,
    pub initial_smoothed: Real,
    pub final_smoothed: Real,
    pub losses: Vec<Real>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Held-out loss after each stage (AR runs only).
    pub stage_eval: Vec<(String, Real)>,
}

/// Joint tokenizer + decoder training on the denoising loss at a fixed
/// learning rate. Writes metrics and checkpoints under `run_dir`; `resume`
/// continues bit-identically from a saved checkpoint.
pub fn train_tokenizer(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<(TokenizerBundle, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("tokenizer training corpus is empty".into()));
    }
    fs::create_dir_all(run_dir)?;
    let f = cfg.stride;
    for clip in &corpus.clips {
        if clip.n_frames < f + 1 {
            return Err(Error::Data(format!(
                "clip {} has {} frames; need at least stride + 1 = {}",
                clip.id,
                clip.n_frames,
                f + 1
            )));
        }
    }

    let (mut bundle, mut opt, start) = match resume {
        None => {
            let bundle = TokenizerBundle::new(cfg)?;
            let opt = AdamW::new(&bundle.params, AdamWConfig::default());
            (bundle, opt, 1u64)
        }
        Some(path) => {
            let (bundle, archive) = TokenizerBundle::load(cfg, path)?;
            let mut opt = AdamW::new(&bundle.params, AdamWConfig::default());
            opt.load_state(&bundle.params, &archive)?;
            let step = archive_step(&archive);
            (bundle, opt, step + 1)
        }
    };

    let mut metrics = MetricsWriter::create(&run_dir.join("metrics.csv"))?;
    let mut losses = Vec::with_capacity(cfg.tok_steps as usize);
    let px = cfg.frame_size * cfg.frame_size;
    let ckpt_path = run_dir.join("tokenizer.ckpt");

    for step in start..=cfg.tok_steps {
        let mut batch_rng = Prng::for_purpose(cfg.seed, "tok-batch", step);
        let mut heads: Vec<Vec<Real>> = Vec::with_capacity(cfg.tok_batch);
        let mut rears: Vec<Vec<Real>> = Vec::with_capacity(cfg.tok_batch);
        let mut clips: Vec<Real> = Vec::with_capacity(cfg.tok_batch * f * px);
        for _ in 0..cfg.tok_batch {
            let clip = &corpus.clips[batch_rng.below(corpus.len())];
            let w0 = batch_rng.below(clip.n_frames - f);
            heads.push(clip.frame_real(w0));
            rears.push(clip.frame_real(w0 + f));
            for t in w0..w0 + f {
                clips.extend(clip.frame_real(t));
            }
        }

        let step_result: Result<Real> = (|| {
            let tape = Tape::new();
            let head_refs: Vec<&[Real]> = heads.iter().map(|v| v.as_slice()).collect();
            let rear_refs: Vec<&[Real]> = rears.iter().map(|v| v.as_slice()).collect();
            let head_tok = bundle.tokenizer.encode_frames(&tape, &bundle.params, &head_refs)?;
            let rear_tok = bundle.tokenizer.encode_frames(&tape, &bundle.params, &rear_refs)?;
            let cond = tape.concat(&[head_tok, rear_tok], 1)?;
            let mut noise_rng = Prng::for_purpose(cfg.seed, "tok-noise", step);
            let loss = diffusion_loss(
                &tape,
                &bundle.params,
                &bundle.denoiser,
                &bundle.schedule,
                &clips,
                cfg.tok_batch,
                cond,
                &mut noise_rng,
            )?;
            let value = tape.scalar(loss)?;
            tape.backward(loss)?;
            opt.step(&mut bundle.params, &tape, cfg.tok_lr)?;
            Ok(value)
        })();
        let loss_value = step_result.map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;

        losses.push(loss_value);
        metrics.row(step, "tokenizer", loss_value, cfg.tok_lr, None)?;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            bundle.save(&run_dir.join(format!("tokenizer_{step:06}.ckpt")), Some(&opt), step)?;
        }
    }
    bundle.save(&ckpt_path, Some(&opt), cfg.tok_steps)?;
    let (initial, fin) = smoothed(&losses, 50);
    Ok((
        bundle,
        TrainReport {
            steps: cfg.tok_steps,
            initial_smoothed: initial,
            final_smoothed: fin,
            losses,
            checkpoint: ckpt_path,
            metrics: metrics.path.clone(),
            stage_eval: Vec::new(),
        },
    ))
}

/// One training example for the AR model.
struct ArSample {
    text: Vec<usize>,
    sets: Vec<DeepTokenSet>,
}

fn image_sample(bundle: &TokenizerBundle, vocab: &TextVocab, clip: &ClipData) -> Result<ArSample> {
    let frame = clip.frame_real(0);
    let sets = bundle.tokenize_frames(&[&frame])?;
    Ok(ArSample { text: vocab.tokenize(&clip.spec.caption()), sets })
}

fn video_sample(
    bundle: &TokenizerBundle,
    vocab: &TextVocab,
    clip: &ClipData,
    stride: usize,
    n_frames: usize,
    rng: &mut Prng,
) -> Result<ArSample> {
    let kept = subsample_indices(clip.n_frames, stride)?;
    if kept.len() < n_frames {
        return Err(Error::Data(format!("clip {} too short for {n_frames} kept frames", clip.id)));
    }
    let offset = rng.below(kept.len() - n_frames + 1);
    let frames: Vec<Vec<Real>> = kept[offset..offset + n_frames]
        .iter()
        .map(|&i| clip.frame_real(i))
        .collect();
    let refs: Vec<&[Real]> = frames.iter().map(|v| v.as_slice()).collect();
    let sets = bundle.tokenize_frames(&refs)?;
    Ok(ArSample { text: vocab.tokenize(&clip.spec.caption()), sets })
}

fn batch_from_samples(samples: Vec<ArSample>, n_q: usize, drop_rate: Real, rng: &mut Prng) -> ArBatch {
    let b = samples.len();
    let n_frames = samples[0].sets.len();
    let drop = ArBatch::sample_drop(b, n_frames, n_q, drop_rate, rng);
    ArBatch {
        text_ids: samples.iter().map(|s| s.text.clone()).collect(),
        sequences: samples.into_iter().map(|s| s.sets).collect(),
        drop,
    }
}

/// Per-sample stage composition for the mixed stage; exposed so tests can
/// measure the image fraction without training.
pub fn mixed_stage_plan(seed: u64, step: u64, batch: usize) -> Vec<bool> {
    let mut rng = Prng::for_purpose(seed, "ar-mix", step);
    (0..batch).map(|_| rng.bernoulli(0.5)).collect()
}

/// Builds held-out evaluation batches from the validation corpus.
pub fn val_batches(
    cfg: &PipelineConfig,
    bundle: &TokenizerBundle,
    val: &Corpus,
    count: usize,
) -> Result<Vec<ArBatch>> {
    let vocab = TextVocab::default();
    let mut batches = Vec::new();
    let mut rng = Prng::for_purpose(cfg.seed, "val-batches", 0);
    let b = cfg.ar_batch.min(val.len());
    for _ in 0..count {
        let mut samples = Vec::with_capacity(b);
        for _ in 0..b {
            let clip = &val.clips[rng.below(val.len())];
            samples.push(video_sample(bundle, &vocab, clip, cfg.stride, cfg.n_frames, &mut rng)?);
        }
        let n_frames = samples[0].sets.len();
        let drop = vec![vec![false; n_frames * cfg.n_queries]; b];
        batches.push(ArBatch {
            text_ids: samples.iter().map(|s| s.text.clone()).collect(),
            sequences: samples.into_iter().map(|s| s.sets).collect(),
            drop,
        });
    }
    Ok(batches)
}

/// Three-stage AR training: image-only (switching from an L2 warm-up to the
/// configured likelihood halfway), a 1:1 image/video mix, then
/// motion-filtered videos. Optimizer moments reset at stage boundaries; a
/// single warm-up + cosine schedule spans all stages.
pub fn train_ar(
    cfg: &PipelineConfig,
    bundle: &TokenizerBundle,
    images: &Corpus,
    videos: &Corpus,
    val: Option<&Corpus>,
    run_dir: &Path,
) -> Result<(ArBundle, TrainReport)> {
    cfg.validate()?;
    if bundle.tokenizer.cfg.n_queries != cfg.n_queries {
        return Err(Error::Config(format!(
            "tokenizer has {} queries, run config wants {}",
            bundle.tokenizer.cfg.n_queries, cfg.n_queries
        )));
    }
    if images.is_empty() || videos.is_empty() {
        return Err(Error::Data("AR training needs image and video corpora".into()));
    }
    if cfg.ar_stage_steps.iter().all(|&s| s == 0) {
        return Err(Error::Config("stage plan is empty".into()));
    }
    fs::create_dir_all(run_dir)?;

    let scores: Vec<Real> = videos.clips.iter().map(|c| c.motion_score).collect();
    let lo = percentile(&scores, cfg.motion_lo_pct)?;
    let hi = percentile(&scores, cfg.motion_hi_pct)?;
    let (motion, motion_fraction) = filter_by_motion(videos, lo, hi)?;
    let motion = if motion.is_empty() { videos.clone() } else { motion };

    let mut ar = ArBundle::new(cfg)?;
    let vocab = TextVocab::default();
    let schedule = LrSchedule::CosineWarmup {
        peak: cfg.ar_peak_lr,
        warmup: cfg.ar_warmup,
        total: cfg.ar_total_steps(),
    };
    let mut metrics = MetricsWriter::create(&run_dir.join("metrics.csv"))?;
    let mut log = fs::File::create(run_dir.join("run.log"))?;
    writeln!(log, "motion filter: [{lo}, {hi}] retained fraction {motion_fraction}")?;

    let eval_batches = match val {
        Some(v) => val_batches(cfg, bundle, v, 4)?,
        None => Vec::new(),
    };

    let mut losses = Vec::new();
    let mut stage_eval = Vec::new();
    let mut global = 0u64;
    let stages = [("image", cfg.ar_stage_steps[0]), ("mixed", cfg.ar_stage_steps[1]), ("motion", cfg.ar_stage_steps[2])];
    for (stage_name, stage_steps) in stages {
        // Fresh moments per stage.
        let mut opt = AdamW::new(&ar.params, AdamWConfig::default());
        let started = std::time::Instant::now();
        for s in 1..=stage_steps {
            global += 1;
            let lr = schedule.at(global);
            let mut batch_rng = Prng::for_purpose(cfg.seed, "ar-batch", global);
            let mut drop_rng = Prng::for_purpose(cfg.seed, "ar-drop", global);

            // Assemble this step's batches; the mixed stage may need two
            // groups because image and video sequences differ in length.
            let mut groups: Vec<ArBatch> = Vec::new();
            match stage_name {
                "image" => {
                    let samples = (0..cfg.ar_batch)
                        .map(|_| image_sample(bundle, &vocab, &images.clips[batch_rng.below(images.len())]))
                        .collect::<Result<Vec<_>>>()?;
                    groups.push(batch_from_samples(samples, cfg.n_queries, cfg.visual_drop, &mut drop_rng));
                }
                "mixed" => {
                    let plan = mixed_stage_plan(cfg.seed, global, cfg.ar_batch);
                    let mut img = Vec::new();
                    let mut vid = Vec::new();
                    for &is_image in &plan {
                        if is_image {
                            img.push(image_sample(bundle, &vocab, &images.clips[batch_rng.below(images.len())])?);
                        } else {
                            vid.push(video_sample(
                                bundle,
                                &vocab,
                                &videos.clips[batch_rng.below(videos.len())],
                                cfg.stride,
                                cfg.n_frames,
                                &mut batch_rng,
                            )?);
                        }
                    }
                    if !img.is_empty() {
                        groups.push(batch_from_samples(img, cfg.n_queries, cfg.visual_drop, &mut drop_rng));
                    }
                    if !vid.is_empty() {
                        groups.push(batch_from_samples(vid, cfg.n_queries, cfg.visual_drop, &mut drop_rng));
                    }
                }
                _ => {
                    let samples = (0..cfg.ar_batch)
                        .map(|_| {
                            video_sample(
                                bundle,
                                &vocab,
                                &motion.clips[batch_rng.below(motion.len())],
                                cfg.stride,
                                cfg.n_frames,
                                &mut batch_rng,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    groups.push(batch_from_samples(samples, cfg.n_queries, cfg.visual_drop, &mut drop_rng));
                }
            }

            // The image stage switches from the L2 warm-up to the configured
            // likelihood halfway through.
            let mode = if stage_name == "image" && s <= stage_steps / 2 {
                LossMode::L2Warmup
            } else {
                LossMode::Standard
            };

            let step_result: Result<Real> = (|| {
                let tape = Tape::new();
                let mut total_positions = 0usize;
                let mut weighted = None;
                for batch in &groups {
                    let positions = batch.text_ids.len() * batch.n_frames() * cfg.n_queries;
                    let loss = ar::nll_step(&ar.model, &tape, &ar.params, batch, mode)?;
                    let scaled = tape.scale(loss, positions as Real)?;
                    weighted = Some(match weighted {
                        None => scaled,
                        Some(acc) => tape.add(acc, scaled)?,
                    });
                    total_positions += positions;
                }
                let loss = tape.scale(weighted.expect("at least one group"), 1.0 / total_positions as Real)?;
                let value = tape.scalar(loss)?;
                tape.backward(loss)?;
                opt.step(&mut ar.params, &tape, lr)?;
                Ok(value)
            })();
            let loss_value = step_result.map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step: global },
                other => other,
            })?;
            losses.push(loss_value);
            metrics.row(global, stage_name, loss_value, lr, None)?;
            if cfg.checkpoint_every > 0 && global % cfg.checkpoint_every == 0 {
                ar.save(&run_dir.join(format!("ar_{global:06}.ckpt")), Some(&opt), global)?;
            }
        }
        // Stage-boundary held-out evaluation.
        if !eval_batches.is_empty() {
            let nll = held_out_loss(&ar.model, &ar.params, &eval_batches)?;
            stage_eval.push((stage_name.to_string(), nll));
            metrics.row(global, stage_name, losses.last().copied().unwrap_or(0.0), schedule.at(global.max(1)), Some(nll))?;
        }
        writeln!(log, "stage {stage_name}: {stage_steps} steps in {:.1}s", started.elapsed().as_secs_f64())?;
    }

    if cfg.adapt_decoder_steps > 0 {
        writeln!(log, "decoder adaptation: {} steps", cfg.adapt_decoder_steps)?;
        adapt_decoder(cfg, bundle, &ar, videos, run_dir)?;
    }

    let ckpt = run_dir.join("ar.ckpt");
    ar.save(&ckpt, None, global)?;
    let (initial, fin) = smoothed(&losses, 50);
    Ok((
        ar,
        TrainReport {
            steps: global,
            initial_smoothed: initial,
            final_smoothed: fin,
            losses,
            checkpoint: ckpt,
            metrics: metrics.path.clone(),
            stage_eval,
        },
    ))
}

/// Optional tail stage: fine-tunes the diffusion decoder on token sets
/// sampled from the AR model's predicted distributions (teacher-forced on
/// real sequences), so the decoder sees the variance the AR head introduces.
/// Only denoiser parameters update. Off by default.
fn adapt_decoder(
    cfg: &PipelineConfig,
    bundle: &TokenizerBundle,
    ar: &ArBundle,
    videos: &Corpus,
    run_dir: &Path,
) -> Result<()> {
    let vocab = TextVocab::default();
    let mut adapted = TokenizerBundle::new(cfg)?;
    // Start from the trained weights.
    let archive = Archive::from_params(&bundle.params);
    archive.load_into(&mut adapted.params)?;
    let den_ids: Vec<_> = adapted
        .params
        .ids()
        .into_iter()
        .filter(|&id| adapted.params.name(id).starts_with("den/"))
        .collect();
    let mut opt = AdamW::new(&adapted.params, AdamWConfig::default());
    let f = cfg.stride;
    let px = cfg.frame_size * cfg.frame_size;
    for step in 1..=cfg.adapt_decoder_steps {
        let mut rng = Prng::for_purpose(cfg.seed, "adapt-batch", step);
        let clip = &videos.clips[rng.below(videos.len())];
        let sample = video_sample(&adapted, &vocab, clip, cfg.stride, 2, &mut rng)?;
        // Predicted token sets under the AR model, teacher-forced.
        let batch = ArBatch {
            text_ids: vec![sample.text.clone()],
            sequences: vec![sample.sets.clone()],
            drop: vec![vec![false; 2 * cfg.n_queries]],
        };
        let predicted = predict_token_sets(&ar.model, &ar.params, &batch, cfg.seed, step)?;
        let mut cond_vals = Vec::new();
        cond_vals.extend_from_slice(&predicted[0].tokens);
        cond_vals.extend_from_slice(&predicted[1].tokens);

        let w0 = rng.below(clip.n_frames - f);
        let mut clip_vals = Vec::with_capacity(f * px);
        for t in w0..w0 + f {
            clip_vals.extend(clip.frame_real(t));
        }
        let tape = Tape::new();
        let cond = tape.constant(&[1, 2 * cfg.n_queries, cfg.token_dim], cond_vals)?;
        let mut noise_rng = Prng::for_purpose(cfg.seed, "adapt-noise", step);
        let loss = diffusion_loss(
            &tape,
            &adapted.params,
            &adapted.denoiser,
            &adapted.schedule,
            &clip_vals,
            1,
            cond,
            &mut noise_rng,
        )?;
        tape.backward(loss)?;
        opt.step_filtered(&mut adapted.params, &tape, cfg.tok_lr, &den_ids)?;
    }
    adapted.save(&run_dir.join("tokenizer_adapted.ckpt"), None, cfg.adapt_decoder_steps)?;
    Ok(())
}

/// Samples one token set per frame from the AR model's teacher-forced
/// per-position distributions.
fn predict_token_sets(
    model: &ArModel,
    params: &ParamSet,
    batch: &ArBatch,
    seed: u64,
    step: u64,
) -> Result<Vec<DeepTokenSet>> {
    let tape = Tape::new();
    let seq = ar::assemble(model, &tape, params, batch)?;
    let hidden = model.forward_hidden(&tape, params, seq)?;
    let layout = ar::SequenceLayout::new(batch.n_frames(), model.cfg.n_queries);
    let raw = model.head_raw_at(&tape, params, hidden, &layout.predictor_positions())?;
    let raws = tape.data(raw);
    let width = model.cfg.head.param_count();
    let (nq, d) = (model.cfg.n_queries, model.cfg.token_dim);
    let mut rng = Prng::for_purpose(seed, "adapt-sample", step);
    let mut out = Vec::new();
    for frame in 0..batch.n_frames() {
        let mut vals = Vec::with_capacity(nq * d);
        for m in 0..nq {
            let i = frame * nq + m;
            let raw_i = &raws[i * width..(i + 1) * width];
            let sample = match model.cfg.head.kind {
                HeadKind::L2 => raw_i.to_vec(),
                _ => {
                    let p = crate::gmm::raw_to_params(raw_i, &model.cfg.head)?;
                    crate::gmm::sample_infer(&p, &mut rng)
                }
            };
            vals.extend(sample);
        }
        out.push(DeepTokenSet { frame_index: frame, tokens: vals, n_q: nq, c: d });
    }
    Ok(out)
}

/// Writes the one-line text sidecar accompanying sampled clips.
pub fn write_sidecar(path: &Path, clip_id: &str, seed: u64, steps: usize, cfg_scale: Real, rescale: Real) -> Result<()> {
    let mut line = String::new();
    let _ = write!(line, "clip={clip_id} seed={seed} steps={steps} cfg_scale={cfg_scale} rescale={rescale}");
    fs::write(path, format!("{line}\n"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_splits, CorpusConfig};

    fn micro_cfg() -> PipelineConfig {
        PipelineConfig {
            seed: 3,
            frame_size: 16,
            patch: 8,
            clip_len: 12,
            stride: 4,
            token_dim: 8,
            n_queries: 2,
            head_k: 2,
            n_frames: 2,
            max_frames: 4,
            tok_steps: 6,
            tok_batch: 2,
            ar_stage_steps: [4, 4, 2],
            ar_batch: 2,
            ar_warmup: 2,
            schedule_steps: 50,
            ddim_steps: 5,
            checkpoint_every: 0,
            ..PipelineConfig::default()
        }
    }

    fn micro_corpus(cfg: &PipelineConfig) -> crate::data::Splits {
        let cc = CorpusConfig { frame_size: cfg.frame_size, clip_len: cfg.clip_len };
        make_splits(&cc, 6, 2, 2, 11).unwrap()
    }

    #[test]
    fn tokenizer_training_is_deterministic_and_resumable() {
        let cfg = micro_cfg();
        let splits = micro_corpus(&cfg);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (_, r1) = train_tokenizer(&cfg, &splits.train, d1.path(), None).unwrap();
        let (_, r2) = train_tokenizer(&cfg, &splits.train, d2.path(), None).unwrap();
        assert_eq!(
            std::fs::read(&r1.metrics).unwrap(),
            std::fs::read(&r2.metrics).unwrap(),
            "identical seeds must give byte-identical metrics"
        );

        // Interrupt at step 3, resume, and compare losses to the full run.
        let d3 = tempfile::tempdir().unwrap();
        let mut cfg_short = cfg.clone();
        cfg_short.tok_steps = 3;
        let (_, r_short) = train_tokenizer(&cfg_short, &splits.train, d3.path(), None).unwrap();
        let d4 = tempfile::tempdir().unwrap();
        let (_, r_resumed) =
            train_tokenizer(&cfg, &splits.train, d4.path(), Some(&r_short.checkpoint)).unwrap();
        // Resumed run records steps 4..=6; they must match the full run.
        assert_eq!(r_resumed.losses.len(), 3);
        for (a, b) in r_resumed.losses.iter().zip(r1.losses[3..].iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "resume must be bit-identical");
        }
    }

    #[test]
    fn tokenizer_checkpoint_roundtrip_is_byte_identical() {
        let cfg = micro_cfg();
        let splits = micro_corpus(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let (bundle, r) = train_tokenizer(&cfg, &splits.train, dir.path(), None).unwrap();
        let (loaded, _) = TokenizerBundle::load(&cfg, &r.checkpoint).unwrap();
        let resaved = dir.path().join("resaved.ckpt");
        loaded.save(&resaved, None, cfg.tok_steps).unwrap();
        // Compare param-only archives (the original includes optimizer state).
        let paramsave = dir.path().join("params_only.ckpt");
        bundle.save(&paramsave, None, cfg.tok_steps).unwrap();
        assert_eq!(std::fs::read(&paramsave).unwrap(), std::fs::read(&resaved).unwrap());
    }

    #[test]
    fn ar_three_stage_run_trains_and_logs() {
        let cfg = micro_cfg();
        let splits = micro_corpus(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let (bundle, _) = train_tokenizer(&cfg, &splits.train, dir.path().join("tok").as_path(), None).unwrap();
        let (_, report) = train_ar(
            &cfg,
            &bundle,
            &splits.images,
            &splits.train,
            Some(&splits.val),
            dir.path().join("ar").as_path(),
        )
        .unwrap();
        assert_eq!(report.steps, 10);
        assert_eq!(report.stage_eval.len(), 3);
        let csv = std::fs::read_to_string(&report.metrics).unwrap();
        assert!(csv.starts_with("step,stage,loss,lr,eval_nll"));
        assert!(csv.contains(",image,"));
        assert!(csv.contains(",mixed,"));
        assert!(csv.contains(",motion,"));
    }

    #[test]
    fn mixed_stage_composition_is_balanced() {
        // Image fraction across 1k planned steps of batch 8.
        let mut image = 0usize;
        let mut total = 0usize;
        for step in 1..=1000u64 {
            for is_image in mixed_stage_plan(42, step, 8) {
                image += is_image as usize;
                total += 1;
            }
        }
        let frac = image as Real / total as Real;
        assert!((0.48..=0.52).contains(&frac), "image fraction {frac}");
    }

    #[test]
    fn cosine_lr_column_is_fixed_for_tokenizer_stage() {
        let cfg = micro_cfg();
        let splits = micro_corpus(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let (_, r) = train_tokenizer(&cfg, &splits.train, dir.path(), None).unwrap();
        let csv = std::fs::read_to_string(&r.metrics).unwrap();
        let rates: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
        assert!(!rates.is_empty());
        assert!(rates.iter().all(|&r| r == rates[0]), "tokenizer stage uses a fixed rate");
    }
}
