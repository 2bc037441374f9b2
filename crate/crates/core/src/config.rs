//! Run configuration: a small `key = value` config-file format with strict
//! unknown-key rejection, named model/budget presets, and the resolved
//! configuration struct shared by the trainers and the CLI.

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmm::{HeadConfig, HeadKind};
use crate::tensor::Real;

/// Parsed `key = value` file. Every key must be consumed by the time
/// [`KvFile::finish`] runs; unknown keys are rejected, never ignored.
pub struct KvFile {
    entries: Vec<(String, String)>,
    consumed: RefCell<HashSet<String>>,
}

impl KvFile {
    pub fn empty() -> Self {
        KvFile { entries: Vec::new(), consumed: RefCell::new(HashSet::new()) }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)))?;
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if entries.iter().any(|(ek, _)| *ek == key) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            entries.push((key, value));
        }
        Ok(KvFile { entries, consumed: RefCell::new(HashSet::new()) })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides on top of the file contents.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) {
        for (k, v) in pairs {
            if let Some(e) = self.entries.iter_mut().find(|(ek, _)| ek == k) {
                e.1 = v.clone();
            } else {
                self.entries.push((k.clone(), v.clone()));
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    /// Errors on any key that was never consumed (misspelled or unsupported).
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&str> = self
            .entries
            .iter()
            .filter(|(k, _)| !consumed.contains(k))
            .map(|(k, _)| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

/// AR trunk size presets mirroring the model-size sweep axis.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ModelPreset {
    Tiny,
    Small,
    Base,
}

impl ModelPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ModelPreset::Tiny),
            "small" => Ok(ModelPreset::Small),
            "base" => Ok(ModelPreset::Base),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelPreset::Tiny => "tiny",
            ModelPreset::Small => "small",
            ModelPreset::Base => "base",
        }
    }

    /// (width, layers, heads) of the AR trunk.
    pub fn ar_dims(&self) -> (usize, usize, usize) {
        match self {
            ModelPreset::Tiny => (32, 2, 4),
            ModelPreset::Small => (64, 3, 4),
            ModelPreset::Base => (96, 4, 6),
        }
    }

    pub fn all() -> [ModelPreset; 3] {
        [ModelPreset::Tiny, ModelPreset::Small, ModelPreset::Base]
    }
}

/// Step budgets. Stage ratios (image : mixed : motion = 5 : 5 : 1) follow
/// the full-scale recipe; only the absolute counts shrink.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BudgetPreset {
    /// Minutes-scale, used by the acceptance suite.
    Ci,
    /// The default desk-scale budget.
    Desk,
}

impl BudgetPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(BudgetPreset::Ci),
            "desk" => Ok(BudgetPreset::Desk),
            other => Err(Error::Config(format!("unknown budget preset `{other}`"))),
        }
    }

    pub fn tokenizer_steps(&self) -> u64 {
        match self {
            BudgetPreset::Ci => 300,
            BudgetPreset::Desk => 2000,
        }
    }

    pub fn ar_stage_steps(&self) -> [u64; 3] {
        match self {
            BudgetPreset::Ci => [250, 250, 50],
            BudgetPreset::Desk => [2500, 2500, 500],
        }
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    // Data/tokenizer geometry.
    pub frame_size: usize,
    pub patch: usize,
    pub clip_len: usize,
    pub stride: usize,
    pub token_dim: usize,
    pub n_queries: usize,
    // Head.
    pub head_kind: HeadKind,
    pub head_k: usize,
    // AR.
    pub preset: ModelPreset,
    pub n_frames: usize,
    pub max_frames: usize,
    pub visual_drop: Real,
    // Tokenizer/denoiser architecture.
    pub enc_layers: usize,
    pub query_layers: usize,
    pub den_width: usize,
    pub den_layers: usize,
    pub den_heads: usize,
    // Tokenizer training.
    pub tok_steps: u64,
    pub tok_batch: usize,
    pub tok_lr: Real,
    // AR training.
    pub ar_stage_steps: [u64; 3],
    pub ar_batch: usize,
    pub ar_peak_lr: Real,
    pub ar_warmup: u64,
    // Diffusion.
    pub schedule_steps: usize,
    pub cond_drop: Real,
    pub ddim_steps: usize,
    pub cfg_scale: Real,
    pub rescale: Real,
    // Motion filter percentiles for the final AR stage.
    pub motion_lo_pct: Real,
    pub motion_hi_pct: Real,
    pub checkpoint_every: u64,
    /// Optional decoder adaptation steps on AR predictions (0 = off).
    pub adapt_decoder_steps: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            frame_size: 32,
            patch: 8,
            clip_len: 64,
            stride: 8,
            token_dim: 64,
            n_queries: 16,
            head_kind: HeadKind::Gmm,
            head_k: 16,
            preset: ModelPreset::Small,
            n_frames: 4,
            max_frames: 16,
            visual_drop: 0.05,
            enc_layers: 2,
            query_layers: 2,
            den_width: 64,
            den_layers: 3,
            den_heads: 4,
            tok_steps: 2000,
            tok_batch: 8,
            tok_lr: 1e-3 as Real,
            ar_stage_steps: [2500, 2500, 500],
            ar_batch: 8,
            ar_peak_lr: 1e-3 as Real,
            ar_warmup: 100,
            schedule_steps: 1000,
            cond_drop: 0.05,
            ddim_steps: 50,
            cfg_scale: 7.5 as Real,
            rescale: 0.7 as Real,
            motion_lo_pct: 30.0,
            motion_hi_pct: 90.0,
            checkpoint_every: 500,
            adapt_decoder_steps: 0,
        }
    }
}

impl PipelineConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig::new(self.head_kind, self.head_k, self.token_dim)
    }

    pub fn ar_total_steps(&self) -> u64 {
        self.ar_stage_steps.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ar_warmup >= self.ar_total_steps() {
            return Err(Error::Config(format!(
                "warmup {} must be below total steps {}",
                self.ar_warmup,
                self.ar_total_steps()
            )));
        }
        if self.tok_lr <= 0.0 || self.ar_peak_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.stride == 0 || self.clip_len <= self.stride {
            return Err(Error::Config("clip_len must exceed stride".into()));
        }
        if self.n_frames == 0 || self.n_frames > self.max_frames {
            return Err(Error::Config("n_frames must be in 1..=max_frames".into()));
        }
        if self.tok_batch == 0 || self.ar_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.motion_lo_pct >= self.motion_hi_pct {
            return Err(Error::Config("motion_lo_pct must be below motion_hi_pct".into()));
        }
        Ok(())
    }

    /// Reads every supported key from `kv`, then rejects leftovers.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        if let Some(b) = kv.get("budget") {
            let b = BudgetPreset::parse(b)?;
            cfg.tok_steps = b.tokenizer_steps();
            cfg.ar_stage_steps = b.ar_stage_steps();
        }
        cfg.seed = kv.get_or("seed", cfg.seed)?;
        cfg.frame_size = kv.get_or("frame_size", cfg.frame_size)?;
        cfg.patch = kv.get_or("patch", cfg.patch)?;
        cfg.clip_len = kv.get_or("clip_len", cfg.clip_len)?;
        cfg.stride = kv.get_or("stride", cfg.stride)?;
        cfg.token_dim = kv.get_or("token_dim", cfg.token_dim)?;
        cfg.n_queries = kv.get_or("n_queries", cfg.n_queries)?;
        if let Some(h) = kv.get("head") {
            cfg.head_kind = HeadKind::parse(h)?;
        }
        cfg.head_k = kv.get_or("head_k", cfg.head_k)?;
        if let Some(p) = kv.get("preset") {
            cfg.preset = ModelPreset::parse(p)?;
        }
        cfg.n_frames = kv.get_or("n_frames", cfg.n_frames)?;
        cfg.max_frames = kv.get_or("max_frames", cfg.max_frames)?;
        cfg.visual_drop = kv.get_or("visual_drop", cfg.visual_drop)?;
        cfg.enc_layers = kv.get_or("enc_layers", cfg.enc_layers)?;
        cfg.query_layers = kv.get_or("query_layers", cfg.query_layers)?;
        cfg.den_width = kv.get_or("den_width", cfg.den_width)?;
        cfg.den_layers = kv.get_or("den_layers", cfg.den_layers)?;
        cfg.den_heads = kv.get_or("den_heads", cfg.den_heads)?;
        cfg.tok_steps = kv.get_or("tok_steps", cfg.tok_steps)?;
        cfg.tok_batch = kv.get_or("tok_batch", cfg.tok_batch)?;
        cfg.tok_lr = kv.get_or("tok_lr", cfg.tok_lr)?;
        cfg.ar_stage_steps[0] = kv.get_or("ar_image_steps", cfg.ar_stage_steps[0])?;
        cfg.ar_stage_steps[1] = kv.get_or("ar_mixed_steps", cfg.ar_stage_steps[1])?;
        cfg.ar_stage_steps[2] = kv.get_or("ar_motion_steps", cfg.ar_stage_steps[2])?;
        cfg.ar_batch = kv.get_or("ar_batch", cfg.ar_batch)?;
        cfg.ar_peak_lr = kv.get_or("ar_peak_lr", cfg.ar_peak_lr)?;
        cfg.ar_warmup = kv.get_or("ar_warmup", cfg.ar_warmup)?;
        cfg.schedule_steps = kv.get_or("schedule_steps", cfg.schedule_steps)?;
        cfg.cond_drop = kv.get_or("cond_drop", cfg.cond_drop)?;
        cfg.ddim_steps = kv.get_or("ddim_steps", cfg.ddim_steps)?;
        cfg.cfg_scale = kv.get_or("cfg_scale", cfg.cfg_scale)?;
        cfg.rescale = kv.get_or("rescale", cfg.rescale)?;
        cfg.motion_lo_pct = kv.get_or("motion_lo_pct", cfg.motion_lo_pct)?;
        cfg.motion_hi_pct = kv.get_or("motion_hi_pct", cfg.motion_hi_pct)?;
        cfg.checkpoint_every = kv.get_or("checkpoint_every", cfg.checkpoint_every)?;
        cfg.adapt_decoder_steps = kv.get_or("adapt_decoder_steps", cfg.adapt_decoder_steps)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form, logged verbatim at the start of every run.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("seed", self.seed.to_string());
        push("frame_size", self.frame_size.to_string());
        push("patch", self.patch.to_string());
        push("clip_len", self.clip_len.to_string());
        push("stride", self.stride.to_string());
        push("token_dim", self.token_dim.to_string());
        push("n_queries", self.n_queries.to_string());
        push("head", self.head_kind.name().to_string());
        push("head_k", self.head_k.to_string());
        push("preset", self.preset.name().to_string());
        push("n_frames", self.n_frames.to_string());
        push("max_frames", self.max_frames.to_string());
        push("visual_drop", self.visual_drop.to_string());
        push("enc_layers", self.enc_layers.to_string());
        push("query_layers", self.query_layers.to_string());
        push("den_width", self.den_width.to_string());
        push("den_layers", self.den_layers.to_string());
        push("den_heads", self.den_heads.to_string());
        push("tok_steps", self.tok_steps.to_string());
        push("tok_batch", self.tok_batch.to_string());
        push("tok_lr", self.tok_lr.to_string());
        push("ar_image_steps", self.ar_stage_steps[0].to_string());
        push("ar_mixed_steps", self.ar_stage_steps[1].to_string());
        push("ar_motion_steps", self.ar_stage_steps[2].to_string());
        push("ar_batch", self.ar_batch.to_string());
        push("ar_peak_lr", self.ar_peak_lr.to_string());
        push("ar_warmup", self.ar_warmup.to_string());
        push("schedule_steps", self.schedule_steps.to_string());
        push("cond_drop", self.cond_drop.to_string());
        push("ddim_steps", self.ddim_steps.to_string());
        push("cfg_scale", self.cfg_scale.to_string());
        push("rescale", self.rescale.to_string());
        push("motion_lo_pct", self.motion_lo_pct.to_string());
        push("motion_hi_pct", self.motion_hi_pct.to_string());
        push("checkpoint_every", self.checkpoint_every.to_string());
        push("adapt_decoder_steps", self.adapt_decoder_steps.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parse_and_overrides() {
        let mut kv = KvFile::parse("# comment\nseed = 7\n\ntok_steps = 50\n").unwrap();
        kv.apply_overrides(&[("seed".into(), "9".into()), ("ar_batch".into(), "2".into())]);
        let cfg = PipelineConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tok_steps, 50);
        assert_eq!(cfg.ar_batch, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = KvFile::parse("seeed = 7\n").unwrap();
        let err = PipelineConfig::from_kv(&kv).unwrap_err();
        assert!(format!("{err}").contains("seeed"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn validation_catches_bad_warmup() {
        let mut cfg = PipelineConfig::default();
        cfg.ar_warmup = 10_000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolved_text_roundtrips() {
        let cfg = PipelineConfig::default();
        let kv = KvFile::parse(&cfg.resolved_text()).unwrap();
        let back = PipelineConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.resolved_text(), back.resolved_text());
    }

    #[test]
    fn budget_presets_preserve_stage_ratio() {
        for b in [BudgetPreset::Ci, BudgetPreset::Desk] {
            let s = b.ar_stage_steps();
            assert_eq!(s[0], s[1]);
            assert_eq!(s[0], 5 * s[2]);
        }
    }
}
