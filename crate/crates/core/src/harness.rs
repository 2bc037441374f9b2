//! Evaluation and ablation harnesses: boundary reconstruction, generation
//! metrics, and the three sweep axes (loss type, token count, model size)
//! run under identical budgets and seeds.

use std::fmt::Write as _;
use std::path::Path;

use crate::ar::{self, TextVocab};
use crate::config::{ModelPreset, PipelineConfig};
use crate::data::{motion_score, Corpus};
use crate::diffusion::{ddim_sample, psnr, ConditionedDenoiser, DdimOptions};
use crate::error::{Error, Result};
use crate::eval::{encoder_features, frechet_distance, held_out_loss};
use crate::gmm::HeadKind;
use crate::rng::Prng;
use crate::tensor::Real;
use crate::tokenizer::{zero_out, DeepTokenSet};
use crate::train::{train_ar, train_tokenizer, val_batches, ArBundle, TokenizerBundle, TrainReport};

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Held-out clips used for reconstruction PSNR.
    pub recon_clips: usize,
    pub ddim_steps: usize,
    pub cfg_scale: Real,
    pub rescale: Real,
    /// Generated sequences (and decoded clips) for the generation metrics.
    pub gen_count: usize,
    pub gen_frames: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            recon_clips: 4,
            ddim_steps: 20,
            cfg_scale: 1.0,
            rescale: 0.0,
            gen_count: 3,
            gen_frames: 2,
            seed: 900,
        }
    }
}

/// Decodes the clip `[w0, w0 + f)` of a stored video from the deep tokens
/// of frames `w0` and `w0 + f`, returning the reconstruction and its PSNR
/// against the ground truth.
pub fn reconstruct(
    bundle: &TokenizerBundle,
    clip: &crate::data::ClipData,
    w0: usize,
    opts: &DdimOptions,
) -> Result<(Vec<Real>, Real)> {
    let f = bundle.denoiser.cfg.clip_len;
    if clip.n_frames < w0 + f + 1 {
        return Err(Error::Data(format!("window {w0} exceeds clip length {}", clip.n_frames)));
    }
    let head = clip.frame_real(w0);
    let rear = clip.frame_real(w0 + f);
    let sets = bundle.tokenize_frames(&[&head, &rear])?;
    let recon = decode_pair(bundle, &sets[0], &sets[1], opts)?;
    let mut truth = Vec::with_capacity(f * clip.h * clip.w);
    for t in w0..w0 + f {
        truth.extend(clip.frame_real(t));
    }
    let score = psnr(&recon, &truth, 2.0);
    Ok((recon, score))
}

/// DDIM-decodes a clip conditioned on a (head, rear) token-set pair.
pub fn decode_pair(
    bundle: &TokenizerBundle,
    head: &DeepTokenSet,
    rear: &DeepTokenSet,
    opts: &DdimOptions,
) -> Result<Vec<Real>> {
    let mut cond = Vec::with_capacity(2 * head.tokens.len());
    cond.extend_from_slice(&head.tokens);
    cond.extend_from_slice(&rear.tokens);
    let predictor = ConditionedDenoiser { den: &bundle.denoiser, ps: &bundle.params, cond };
    ddim_sample(&predictor, &bundle.schedule, bundle.denoiser.cfg.pixels(), opts)
}

pub struct EvalReport {
    pub rows: Vec<(String, Real)>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<Real> {
        self.rows.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.rows {
            let _ = writeln!(s, "{k:<width$}  {v:.6}");
        }
        s
    }
}

/// Full evaluation of a tokenizer + AR pair on a held-out corpus:
/// reconstruction PSNR against a random-noise baseline and a zeroed-token
/// ablation, held-out loss, motion of decoded generations against a
/// static-condition baseline, and the feature-space Frechet distance of
/// generated frames.
pub fn evaluate(
    cfg: &PipelineConfig,
    bundle: &TokenizerBundle,
    ar_bundle: &ArBundle,
    val: &Corpus,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if ar_bundle.model.cfg.n_queries != bundle.tokenizer.cfg.n_queries {
        return Err(Error::Config(format!(
            "AR model expects {} queries per frame, tokenizer produces {}",
            ar_bundle.model.cfg.n_queries,
            bundle.tokenizer.cfg.n_queries
        )));
    }
    if val.is_empty() {
        return Err(Error::Data("empty evaluation corpus".into()));
    }
    let mut rows = Vec::new();
    let f = bundle.denoiser.cfg.clip_len;
    let px = cfg.frame_size * cfg.frame_size;

    // Boundary reconstruction vs noise and zeroed-condition baselines.
    let mut recon_acc = 0.0;
    let mut noise_acc = 0.0;
    let mut zero_acc = 0.0;
    let n_recon = opts.recon_clips.min(val.len());
    for (i, clip) in val.clips.iter().take(n_recon).enumerate() {
        let ddim = DdimOptions {
            steps: opts.ddim_steps,
            cfg_scale: opts.cfg_scale,
            rescale: opts.rescale,
            seed: opts.seed + i as u64,
        };
        let (_, score) = reconstruct(bundle, clip, 0, &ddim)?;
        recon_acc += score;

        let mut truth = Vec::with_capacity(f * px);
        for t in 0..f {
            truth.extend(clip.frame_real(t));
        }
        let mut nrng = Prng::for_purpose(opts.seed, "noise-baseline", i as u64);
        let noise: Vec<Real> = (0..truth.len()).map(|_| nrng.uniform_range(-1.0, 1.0)).collect();
        noise_acc += psnr(&noise, &truth, 2.0);

        let head = clip.frame_real(0);
        let rear = clip.frame_real(f);
        let sets = bundle.tokenize_frames(&[&head, &rear])?;
        let zh = zero_out(&sets[0], sets[0].n_q)?;
        let zr = zero_out(&sets[1], sets[1].n_q)?;
        let zrec = decode_pair(bundle, &zh, &zr, &ddim)?;
        zero_acc += psnr(&zrec, &truth, 2.0);
    }
    rows.push(("recon_psnr".into(), recon_acc / n_recon as Real));
    rows.push(("noise_psnr".into(), noise_acc / n_recon as Real));
    rows.push(("zeroed_psnr".into(), zero_acc / n_recon as Real));

    // Held-out teacher-forced loss.
    let batches = val_batches(cfg, bundle, val, 2)?;
    rows.push(("heldout_loss".into(), held_out_loss(&ar_bundle.model, &ar_bundle.params, &batches)?));

    // Generation: decode adjacent generated token sets and compare their
    // motion against clips decoded from a repeated (static) token set.
    let vocab = TextVocab::default();
    let mut gen_motion = 0.0;
    let mut static_motion = 0.0;
    let mut gen_frames_feat: Vec<Vec<Real>> = Vec::new();
    for i in 0..opts.gen_count {
        let caption = val.clips[i % val.len()].spec.caption();
        let ids = vocab.tokenize(&caption);
        let sets = ar::generate(&ar_bundle.model, &ar_bundle.params, &ids, opts.gen_frames.max(2), opts.seed + 70 + i as u64)?;
        let ddim = DdimOptions {
            steps: opts.ddim_steps,
            cfg_scale: opts.cfg_scale,
            rescale: opts.rescale,
            seed: opts.seed + 40 + i as u64,
        };
        let clip = decode_pair(bundle, &sets[0], &sets[1], &ddim)?;
        gen_motion += motion_score(&clip, f, px)?;
        let held = decode_pair(bundle, &sets[0], &sets[0], &ddim)?;
        static_motion += motion_score(&held, f, px)?;
        for t in 0..f {
            gen_frames_feat.push(clip[t * px..(t + 1) * px].to_vec());
        }
    }
    rows.push(("gen_motion".into(), gen_motion / opts.gen_count as Real));
    rows.push(("static_motion".into(), static_motion / opts.gen_count as Real));

    // Frechet distance in the encoder's feature space.
    let mut val_frames: Vec<Vec<Real>> = Vec::new();
    for clip in val.clips.iter().take(8) {
        for t in crate::tokenizer::subsample_indices(clip.n_frames, cfg.stride)? {
            val_frames.push(clip.frame_real(t));
        }
    }
    let gf = encoder_features(&bundle.tokenizer, &bundle.params, &gen_frames_feat)?;
    let vf = encoder_features(&bundle.tokenizer, &bundle.params, &val_frames)?;
    let d = bundle.tokenizer.cfg.feat_dim;
    rows.push((
        "frechet_gen".into(),
        frechet_distance(&gf, gen_frames_feat.len(), &vf, val_frames.len(), d)?,
    ));

    Ok(EvalReport { rows })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AblationAxis {
    LossType,
    NTokens,
    ModelSize,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss_type" => Ok(AblationAxis::LossType),
            "n_tokens" => Ok(AblationAxis::NTokens),
            "model_size" => Ok(AblationAxis::ModelSize),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected loss_type, n_tokens, or model_size)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::LossType => "loss_type",
            AblationAxis::NTokens => "n_tokens",
            AblationAxis::ModelSize => "model_size",
        }
    }
}

pub struct SweepRow {
    pub setting: String,
    pub final_train_loss: Real,
    pub metrics: Vec<(String, Real)>,
}

pub struct SweepReport {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<String> = Vec::new();
        for row in &self.rows {
            for (k, _) in &row.metrics {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        let mut s = format!("setting,final_train_loss,{}\n", cols.join(","));
        for row in &self.rows {
            let _ = write!(s, "{},{}", row.setting, row.final_train_loss);
            for c in &cols {
                match row.metrics.iter().find(|(k, _)| k == c) {
                    Some((_, v)) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("ablation axis: {}\n", self.axis);
        for row in &self.rows {
            let _ = write!(s, "  {:<10} final_train_loss={:.6}", row.setting, row.final_train_loss);
            for (k, v) in &row.metrics {
                let _ = write!(s, " {k}={v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Corpora handed to the sweeps.
pub struct AblationData<'a> {
    pub images: &'a Corpus,
    pub videos: &'a Corpus,
    pub val: &'a Corpus,
}

/// Trains one model per setting along the chosen axis under the budgets in
/// `cfg` (identical for every setting) and reports per-setting metrics.
///
/// The loss-type and model-size axes train AR models against a fixed
/// tokenizer; the token-count axis retrains the tokenizer itself.
pub fn ablate(
    axis: AblationAxis,
    cfg: &PipelineConfig,
    data: &AblationData,
    tokenizer: Option<&TokenizerBundle>,
    run_dir: &Path,
) -> Result<SweepReport> {
    let mut rows = Vec::new();
    match axis {
        AblationAxis::LossType => {
            let bundle = tokenizer
                .ok_or_else(|| Error::Config("loss_type sweep needs a trained tokenizer".into()))?;
            for (label, kind, k) in
                [("l2", HeadKind::L2, 1), ("gaussian", HeadKind::Gaussian, 1), ("gmm-16", HeadKind::Gmm, 16)]
            {
                let mut c = cfg.clone();
                c.head_kind = kind;
                c.head_k = k;
                let dir = run_dir.join(format!("loss_{label}"));
                let (ar_bundle, report) =
                    train_ar(&c, bundle, data.images, data.videos, Some(data.val), &dir)?;
                let eval = evaluate(&c, bundle, &ar_bundle, data.val, &EvalOptions { seed: c.seed, ..EvalOptions::default() })?;
                rows.push(SweepRow {
                    setting: label.to_string(),
                    final_train_loss: report.final_smoothed,
                    metrics: eval.rows,
                });
            }
        }
        AblationAxis::NTokens => {
            for n_q in [8usize, 16, 32] {
                let mut c = cfg.clone();
                c.n_queries = n_q;
                let dir = run_dir.join(format!("ntok_{n_q}"));
                let (bundle, report) = train_tokenizer(&c, data.videos, &dir, None)?;
                // Reconstruction quality on the first validation clip.
                let ddim = DdimOptions { steps: c.ddim_steps.min(c.schedule_steps), cfg_scale: 1.0, rescale: 0.0, seed: c.seed };
                let (_, score) = reconstruct(&bundle, &data.val.clips[0], 0, &ddim)?;
                rows.push(SweepRow {
                    setting: n_q.to_string(),
                    final_train_loss: report.final_smoothed,
                    metrics: vec![("recon_psnr".into(), score)],
                });
            }
        }
        AblationAxis::ModelSize => {
            let bundle = tokenizer
                .ok_or_else(|| Error::Config("model_size sweep needs a trained tokenizer".into()))?;
            for preset in ModelPreset::all() {
                let mut c = cfg.clone();
                c.preset = preset;
                let dir = run_dir.join(format!("size_{}", preset.name()));
                let (_, report): (ArBundle, TrainReport) =
                    train_ar(&c, bundle, data.images, data.videos, Some(data.val), &dir)?;
                rows.push(SweepRow {
                    setting: preset.name().to_string(),
                    final_train_loss: report.final_smoothed,
                    metrics: report.stage_eval.iter().map(|(k, v)| (format!("nll_after_{k}"), *v)).collect(),
                });
            }
        }
    }
    let report = SweepReport { axis: axis.name().to_string(), rows };
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join(format!("ablate_{}.csv", axis.name())), report.to_csv())?;
    Ok(report)
}

/// Budget for the bimodal head-comparison task.
#[derive(Clone, Copy, Debug)]
pub struct BimodalTrainOptions {
    pub steps: u64,
    pub batch: usize,
    pub pairs: usize,
    pub peak_lr: Real,
    pub warmup: u64,
    pub seed: u64,
    pub preset: ModelPreset,
}

impl Default for BimodalTrainOptions {
    fn default() -> Self {
        BimodalTrainOptions {
            steps: 600,
            batch: 16,
            pairs: 128,
            peak_lr: 3e-3 as Real,
            warmup: 30,
            seed: 77,
            preset: ModelPreset::Tiny,
        }
    }
}

/// Trains an AR model with the given head on the bimodal token task under
/// the stated budget. Both heads in the comparison get the exact same
/// budget, corpus, and seeds.
pub fn train_bimodal_head(
    task: &crate::eval::BimodalTask,
    head: crate::gmm::HeadConfig,
    opts: &BimodalTrainOptions,
) -> Result<(crate::train::ArBundle, Real)> {
    use crate::ar::{nll_step, ArConfig, LossMode, TextVocab};
    use crate::optim::{AdamW, AdamWConfig, LrSchedule};
    use crate::tensor::Tape;

    let (width, layers, heads) = opts.preset.ar_dims();
    let cfg = ArConfig {
        text_vocab: TextVocab::default().len(),
        token_dim: task.dim,
        n_queries: task.n_queries,
        width,
        layers,
        heads,
        max_frames: task.n_frames,
        head,
        visual_drop: 0.05,
    };
    let mut params = crate::params::ParamSet::new();
    let mut rng = Prng::for_purpose(opts.seed, "bimodal-init", 0);
    let model = crate::ar::ArModel::new(&mut params, &mut rng, cfg)?;
    let corpus = task.corpus(opts.seed, opts.pairs);
    let mut opt = AdamW::new(&params, AdamWConfig::default());
    let schedule = LrSchedule::CosineWarmup { peak: opts.peak_lr, warmup: opts.warmup, total: opts.steps };
    let mut last = 0.0;
    for step in 1..=opts.steps {
        let mut batch_rng = Prng::for_purpose(opts.seed, "bimodal-batch", step);
        let idx: Vec<usize> = (0..opts.batch).map(|_| batch_rng.below(corpus.len())).collect();
        let mut drop_rng = Prng::for_purpose(opts.seed, "bimodal-drop", step);
        let drop = crate::ar::ArBatch::sample_drop(opts.batch, task.n_frames, task.n_queries, 0.05, &mut drop_rng);
        let batch = task.batch(&corpus, &idx, drop);
        let tape = Tape::new();
        let loss = nll_step(&model, &tape, &params, &batch, LossMode::Standard)?;
        last = tape.scalar(loss)?;
        tape.backward(loss)?;
        opt.step(&mut params, &tape, schedule.at(step))?;
    }
    Ok((crate::train::ArBundle { params, model }, last))
}

/// Generates sequences from a trained bimodal model and measures mode
/// coverage of the produced tokens.
pub fn bimodal_generation_coverage(
    task: &crate::eval::BimodalTask,
    bundle: &crate::train::ArBundle,
    n_sequences: usize,
    radius: Real,
    seed: u64,
) -> Result<crate::eval::ModeCoverage> {
    let text = vec![crate::ar::PAD_ID; crate::ar::TEXT_LEN];
    let mut sets = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        sets.push(ar::generate(&bundle.model, &bundle.params, &text, task.n_frames, seed + i as u64)?);
    }
    let points = crate::eval::BimodalTask::flatten_tokens(&sets);
    crate::eval::mode_coverage(&points, &task.modes(), radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::data::{make_splits, CorpusConfig};

    fn micro_cfg() -> PipelineConfig {
        PipelineConfig {
            seed: 5,
            frame_size: 16,
            patch: 8,
            clip_len: 12,
            stride: 4,
            token_dim: 8,
            n_queries: 2,
            head_k: 2,
            n_frames: 2,
            max_frames: 4,
            tok_steps: 5,
            tok_batch: 2,
            ar_stage_steps: [4, 4, 2],
            ar_batch: 2,
            ar_warmup: 2,
            schedule_steps: 40,
            ddim_steps: 4,
            checkpoint_every: 0,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn evaluate_is_reproducible_and_checks_query_mismatch() {
        let cfg = micro_cfg();
        let cc = CorpusConfig { frame_size: cfg.frame_size, clip_len: cfg.clip_len };
        let splits = make_splits(&cc, 4, 2, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (bundle, _) = train_tokenizer(&cfg, &splits.train, dir.path(), None).unwrap();
        let (ar_bundle, _) = train_ar(&cfg, &bundle, &splits.images, &splits.train, None, &dir.path().join("ar")).unwrap();

        let opts = EvalOptions { recon_clips: 1, ddim_steps: 3, gen_count: 1, ..EvalOptions::default() };
        let a = evaluate(&cfg, &bundle, &ar_bundle, &splits.val, &opts).unwrap();
        let b = evaluate(&cfg, &bundle, &ar_bundle, &splits.val, &opts).unwrap();
        assert_eq!(a.to_csv(), b.to_csv(), "identical evaluation must be identical");
        assert!(a.get("recon_psnr").is_some());
        assert!(a.get("frechet_gen").is_some());

        // Mismatched query counts must error.
        let mut cfg2 = cfg.clone();
        cfg2.n_queries = 3;
        let ar_wrong = crate::train::ArBundle::new(&cfg2).unwrap();
        assert!(evaluate(&cfg, &bundle, &ar_wrong, &splits.val, &opts).is_err());
    }

    #[test]
    fn ablate_axis_parse_and_row_sets() {
        assert!(AblationAxis::parse("nonsense").is_err());
        assert_eq!(AblationAxis::parse("loss_type").unwrap(), AblationAxis::LossType);
        assert_eq!(AblationAxis::parse("n_tokens").unwrap(), AblationAxis::NTokens);
        assert_eq!(AblationAxis::parse("model_size").unwrap(), AblationAxis::ModelSize);
    }
}
