//! Command-line surface. Every training or sampling subcommand reads an
//! optional `key = value` config file plus `--set key=value` overrides,
//! logs the resolved configuration verbatim, and writes its outputs under a
//! run directory. Relative run directories are resolved against the
//! `DEEPTOK_RUN_ROOT` environment variable when it is set.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ar::{self, TextVocab};
use crate::config::{KvFile, PipelineConfig};
use crate::data::{self, CorpusConfig};
use crate::diffusion::DdimOptions;
use crate::error::{Error, Result};
use crate::harness::{self, AblationAxis, AblationData, EvalOptions};
use crate::tensor::Real;
use crate::train::{self, ArBundle, TokenizerBundle};

#[derive(Parser)]
#[command(name = "deeptok", version, about = "Continuous-token video modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut kv = match &self.config {
            Some(p) => KvFile::from_file(p)?,
            None => KvFile::empty(),
        };
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        kv.apply_overrides(&pairs);
        PipelineConfig::from_kv(&kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train/val/test splits plus images).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        frame_size: usize,
        #[arg(long, default_value_t = 64)]
        clip_len: usize,
    },
    /// Train the tokenizer and diffusion decoder jointly.
    TrainTokenizer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus root written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the autoregressive model over deep tokens (three stages).
    TrainAr {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Trained tokenizer checkpoint.
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also fine-tune the diffusion decoder on AR predictions.
        #[arg(long, default_value_t = false)]
        adapt_decoder: bool,
    },
    /// Reconstruct held-out clips from their boundary deep tokens.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Index into the validation split.
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Generate deep tokens from a caption and decode them to clips.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        ar: PathBuf,
        #[arg(long, default_value = "circle moving right quickly")]
        caption: String,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a tokenizer + AR checkpoint pair on the validation split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        ar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one ablation axis: loss_type, n_tokens, or model_size.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        /// Trained tokenizer checkpoint (loss_type and model_size axes).
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_root() -> PathBuf {
    std::env::var_os("DEEPTOK_RUN_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(out: &Path) -> PathBuf {
    if out.is_absolute() {
        out.to_path_buf()
    } else {
        run_root().join(out)
    }
}

fn log_resolved(cfg: &PipelineConfig, run_dir: &Path) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    let text = cfg.resolved_text();
    print!("{text}");
    fs::write(run_dir.join("resolved_config.txt"), text)?;
    Ok(())
}

fn checkpoint_trained(archive: &crate::checkpoint::Archive, what: &str) -> Result<()> {
    if train::archive_step(archive) == 0 {
        return Err(Error::Checkpoint(format!("{what} checkpoint records no training steps")));
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, seed, train, val, test, frame_size, clip_len } => {
            let out = resolve_out(&out);
            let cfg = CorpusConfig { frame_size, clip_len };
            let splits = data::make_splits(&cfg, train, val, test, seed)?;
            data::save_splits(&out, &splits)?;
            println!(
                "corpus written to {} (train {} / val {} / test {} / images {})",
                out.display(),
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                splits.images.len()
            );
        }
        Command::TrainTokenizer { config, data: data_dir, out, resume } => {
            let cfg = config.resolve()?;
            let out = resolve_out(&out);
            log_resolved(&cfg, &out)?;
            let corpus = data::load_split(&data_dir, "train")?;
            let (_, report) = train::train_tokenizer(&cfg, &corpus, &out, resume.as_deref())?;
            println!(
                "tokenizer trained: {} steps, smoothed loss {:.6} -> {:.6}, checkpoint {}",
                report.steps,
                report.initial_smoothed,
                report.final_smoothed,
                report.checkpoint.display()
            );
        }
        Command::TrainAr { config, data: data_dir, tokenizer, out, adapt_decoder } => {
            let mut cfg = config.resolve()?;
            if adapt_decoder && cfg.adapt_decoder_steps == 0 {
                cfg.adapt_decoder_steps = cfg.ar_stage_steps[2].max(1);
            }
            let out = resolve_out(&out);
            log_resolved(&cfg, &out)?;
            let (bundle, archive) = TokenizerBundle::load(&cfg, &tokenizer)?;
            checkpoint_trained(&archive, "tokenizer")?;
            let images = data::load_split(&data_dir, "images")?;
            let videos = data::load_split(&data_dir, "train")?;
            let val = data::load_split(&data_dir, "val")?;
            let (_, report) = train::train_ar(&cfg, &bundle, &images, &videos, Some(&val), &out)?;
            println!(
                "ar model trained: {} steps, smoothed loss {:.6} -> {:.6}, checkpoint {}",
                report.steps,
                report.initial_smoothed,
                report.final_smoothed,
                report.checkpoint.display()
            );
            for (stage, nll) in &report.stage_eval {
                println!("held-out loss after {stage}: {nll:.6}");
            }
        }
        Command::Reconstruct { config, data: data_dir, tokenizer, out, clip, window } => {
            let cfg = config.resolve()?;
            let out = resolve_out(&out);
            log_resolved(&cfg, &out)?;
            let (bundle, archive) = TokenizerBundle::load(&cfg, &tokenizer)?;
            checkpoint_trained(&archive, "tokenizer")?;
            let val = data::load_split(&data_dir, "val")?;
            let clip_data = val
                .clips
                .get(clip)
                .ok_or_else(|| Error::Data(format!("clip index {clip} out of {}", val.len())))?;
            let ddim = DdimOptions {
                steps: cfg.ddim_steps.min(cfg.schedule_steps),
                cfg_scale: cfg.cfg_scale,
                rescale: cfg.rescale,
                seed: cfg.seed,
            };
            let (recon, score) = harness::reconstruct(&bundle, clip_data, window, &ddim)?;
            write_clip_frames(&out.join("recon"), &recon, cfg.stride, cfg.frame_size)?;
            train::write_sidecar(
                &out.join("recon").join("sidecar.txt"),
                &clip_data.id,
                cfg.seed,
                ddim.steps,
                ddim.cfg_scale,
                ddim.rescale,
            )?;
            println!("reconstruction psnr {score:.3} dB written to {}", out.join("recon").display());
        }
        Command::Generate { config, tokenizer, ar, caption, frames, seed, out } => {
            let cfg = config.resolve()?;
            let out = resolve_out(&out);
            log_resolved(&cfg, &out)?;
            if frames == 0 {
                return Err(Error::invalid("generate", "--frames must be >= 1"));
            }
            let (bundle, tok_archive) = TokenizerBundle::load(&cfg, &tokenizer)?;
            checkpoint_trained(&tok_archive, "tokenizer")?;
            let (ar_bundle, ar_archive) = ArBundle::load(&cfg, &ar)?;
            checkpoint_trained(&ar_archive, "ar")?;
            let vocab = TextVocab::default();
            let ids = vocab.tokenize(&caption);
            let sets = ar::generate(&ar_bundle.model, &ar_bundle.params, &ids, frames, seed)?;

            // Token sets in the shared archive format.
            let clip_id = format!("gen-{seed}");
            let mut archive = crate::checkpoint::Archive::new();
            for s in &sets {
                archive.push(
                    &format!("deeptok/{clip_id}/{}", s.frame_index),
                    &[s.n_q, s.c],
                    s.tokens.clone(),
                );
            }
            archive.save(&out.join("tokens.ckpt"))?;

            // One decoded clip per generated frame; the final segment holds
            // on the last token set.
            let ddim_base = DdimOptions {
                steps: cfg.ddim_steps.min(cfg.schedule_steps),
                cfg_scale: cfg.cfg_scale,
                rescale: cfg.rescale,
                seed,
            };
            for i in 0..frames {
                let head = &sets[i];
                let rear = if i + 1 < frames { &sets[i + 1] } else { &sets[i] };
                let ddim = DdimOptions { seed: seed.wrapping_add(i as u64), ..ddim_base };
                let clip = harness::decode_pair(&bundle, head, rear, &ddim)?;
                let dir = out.join(format!("clip_{i:02}"));
                write_clip_frames(&dir, &clip, cfg.stride, cfg.frame_size)?;
                train::write_sidecar(
                    &dir.join("sidecar.txt"),
                    &format!("{clip_id}/{i}"),
                    ddim.seed,
                    ddim.steps,
                    ddim.cfg_scale,
                    ddim.rescale,
                )?;
            }
            println!("{frames} token sets and {frames} decoded clips written to {}", out.display());
        }
        Command::Eval { config, data: data_dir, tokenizer, ar, out } => {
            let cfg = config.resolve()?;
            let out = resolve_out(&out);
            log_resolved(&cfg, &out)?;
            let (bundle, tok_archive) = TokenizerBundle::load(&cfg, &tokenizer)?;
            checkpoint_trained(&tok_archive, "tokenizer")?;
            let (ar_bundle, ar_archive) = ArBundle::load(&cfg, &ar)?;
            checkpoint_trained(&ar_archive, "ar")?;
            let val = data::load_split(&data_dir, "val")?;
            let opts = EvalOptions {
                ddim_steps: cfg.ddim_steps.min(cfg.schedule_steps),
                cfg_scale: cfg.cfg_scale,
                rescale: cfg.rescale,
                seed: cfg.seed,
                ..EvalOptions::default()
            };
            let report = harness::evaluate(&cfg, &bundle, &ar_bundle, &val, &opts)?;
            fs::write(out.join("eval.csv"), report.to_csv())?;
            print!("{}", report.to_table());
        }
        Command::Ablate { config, axis, data: data_dir, tokenizer, out } => {
            let cfg = config.resolve()?;
            let out = resolve_out(&out);
            log_resolved(&cfg, &out)?;
            let axis = AblationAxis::parse(&axis)?;
            let bundle = match &tokenizer {
                Some(p) => {
                    let (b, archive) = TokenizerBundle::load(&cfg, p)?;
                    checkpoint_trained(&archive, "tokenizer")?;
                    Some(b)
                }
                None => None,
            };
            let images = data::load_split(&data_dir, "images")?;
            let videos = data::load_split(&data_dir, "train")?;
            let val = data::load_split(&data_dir, "val")?;
            let data = AblationData { images: &images, videos: &videos, val: &val };
            let report = harness::ablate(axis, &cfg, &data, bundle.as_ref(), &out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

/// Writes the frames of a decoded clip as 8-bit portable graymaps.
fn write_clip_frames(dir: &Path, clip: &[Real], n_frames: usize, frame_size: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let px = frame_size * frame_size;
    for t in 0..n_frames {
        let frame: Vec<u8> = clip[t * px..(t + 1) * px].iter().map(|&v| data::quantize(v)).collect();
        data::write_pgm(&dir.join(format!("frame_{t:03}.pgm")), &frame, frame_size, frame_size)?;
    }
    Ok(())
}

/// Entry point: returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successful exits.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn cli_main() -> i32 {
    main_with_args(std::env::args_os())
}
