//! Boundary-conditioned diffusion decoder.
//!
//! A small transformer denoiser reconstructs a fixed-length clip from the
//! deep tokens of its head and rear frames. Training follows the standard
//! denoising objective with a v-prediction target
//! `v = sqrt(ab) * eps - sqrt(1 - ab) * x0`; sampling is plain DDIM (eta = 0)
//! with classifier-free guidance and std-rescale of the guided prediction.

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Block, Linear};
use crate::params::{normal_init, ParamId, ParamSet};
use crate::rng::Prng;
use crate::tensor::{Real, Tape, Tensor};

/// Cumulative signal levels for a diffusion process of `steps` steps.
/// Timesteps are 1-based: `t` in `1..=steps`.
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<Real>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: Real, beta_end: Real) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("noise_schedule", "steps must be >= 1"));
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0 as Real;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as Real / (steps - 1) as Real
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let s = NoiseSchedule { steps, alpha_bar };
        s.validate()?;
        Ok(s)
    }

    pub fn default_train() -> Self {
        NoiseSchedule::linear(1000, 1e-4 as Real, 0.02 as Real).expect("default schedule")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.steps {
            return Err(Error::invalid("noise_schedule", "length mismatch"));
        }
        for w in self.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::invalid("noise_schedule", "alpha_bar must strictly decrease"));
            }
        }
        if self.alpha_bar.iter().any(|&a| a <= 0.0 || a >= 1.0) {
            return Err(Error::invalid("noise_schedule", "alpha_bar must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn at(&self, t: usize) -> Result<Real> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid("noise_schedule", format!("t = {t} outside 1..={}", self.steps)));
        }
        Ok(self.alpha_bar[t - 1])
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for an explicit signal level.
pub fn q_sample_with(x0: &[Real], alpha_bar: Real, eps: &[Real]) -> Vec<Real> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps.iter()).map(|(&x, &e)| sa * x + sb * e).collect()
}

pub fn q_sample(schedule: &NoiseSchedule, x0: &[Real], t: usize, eps: &[Real]) -> Result<Vec<Real>> {
    if eps.len() != x0.len() {
        return Err(Error::shape("q_sample", "noise shape differs from clip"));
    }
    Ok(q_sample_with(x0, schedule.at(t)?, eps))
}

/// v-prediction target `sqrt(ab) * eps - sqrt(1 - ab) * x0`.
pub fn v_target_with(x0: &[Real], eps: &[Real], alpha_bar: Real) -> Vec<Real> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps.iter()).map(|(&x, &e)| sa * e - sb * x).collect()
}

pub fn v_target(schedule: &NoiseSchedule, x0: &[Real], eps: &[Real], t: usize) -> Result<Vec<Real>> {
    Ok(v_target_with(x0, eps, schedule.at(t)?))
}

/// Recovers `x0 = sqrt(ab) * x_t - sqrt(1 - ab) * v`.
pub fn x0_from_v(x_t: &[Real], v: &[Real], alpha_bar: Real) -> Vec<Real> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter().zip(v.iter()).map(|(&x, &vv)| sa * x - sb * vv).collect()
}

/// Recovers `eps = sqrt(1 - ab) * x_t + sqrt(ab) * v`.
pub fn eps_from_v(x_t: &[Real], v: &[Real], alpha_bar: Real) -> Vec<Real> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter().zip(v.iter()).map(|(&x, &vv)| sb * x + sa * vv).collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PredictTarget {
    /// Default: regress the v-parameterised target.
    V,
    /// Alternative: regress the noise directly.
    Eps,
}

#[derive(Clone, Copy, Debug)]
pub struct DenoiserConfig {
    pub frame_size: usize,
    pub patch: usize,
    pub channels: usize,
    /// Clip length f (frames per decoded clip).
    pub clip_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Deep-token channel dim C.
    pub token_dim: usize,
    /// Condition tokens per boundary (N_q); the denoiser cross-attends to
    /// 2 * N_q tokens.
    pub n_queries: usize,
    pub target: PredictTarget,
    /// Probability of replacing the whole condition with the learned null
    /// token during training (enables classifier-free guidance).
    pub cond_drop: Real,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            frame_size: 32,
            patch: 8,
            channels: 1,
            clip_len: 8,
            width: 64,
            layers: 3,
            heads: 4,
            token_dim: 64,
            n_queries: 16,
            target: PredictTarget::V,
            cond_drop: 0.05,
        }
    }
}

impl DenoiserConfig {
    pub fn n_patches(&self) -> usize {
        let side = self.frame_size / self.patch;
        side * side
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.clip_len * self.n_patches()
    }

    pub fn cond_len(&self) -> usize {
        2 * self.n_queries
    }

    pub fn pixels(&self) -> usize {
        self.clip_len * self.frame_size * self.frame_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size % self.patch != 0 {
            return Err(Error::Config("frame size must be a multiple of patch".into()));
        }
        if self.clip_len == 0 || self.width == 0 || self.layers == 0 {
            return Err(Error::Config("denoiser dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config("cond_drop must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Transformer over (frame, patch) tokens with added timestep embedding and
/// cross-attention to the two boundary token sets.
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub patch_embed: Linear,
    pub frame_pos: ParamId,
    pub patch_pos: ParamId,
    pub time_l1: Linear,
    pub time_l2: Linear,
    pub cond_proj: Linear,
    pub boundary_embed: ParamId,
    pub null_cond: ParamId,
    pub blocks: Vec<Block>,
    pub norm: crate::nn::LayerNorm,
    pub out: Linear,
}

impl Denoiser {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(ps, rng, &format!("den/block{i}"), w, cfg.heads, false, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Denoiser {
            patch_embed: Linear::new(ps, rng, "den/patch_embed", cfg.patch_pixels(), w)?,
            frame_pos: ps.add("den/frame_pos", &[cfg.clip_len, w], normal_init(rng, cfg.clip_len * w, 0.02))?,
            patch_pos: ps.add("den/patch_pos", &[cfg.n_patches(), w], normal_init(rng, cfg.n_patches() * w, 0.02))?,
            time_l1: Linear::new(ps, rng, "den/time_l1", w, w)?,
            time_l2: Linear::new(ps, rng, "den/time_l2", w, w)?,
            cond_proj: Linear::new(ps, rng, "den/cond_proj", cfg.token_dim, w)?,
            boundary_embed: ps.add("den/boundary_embed", &[2, w], normal_init(rng, 2 * w, 0.02))?,
            null_cond: ps.add("den/null_cond", &[1, w], normal_init(rng, w, 0.02))?,
            blocks,
            norm: crate::nn::LayerNorm::new(ps, "den/norm", w)?,
            out: Linear::new(ps, rng, "den/out", w, cfg.patch_pixels())?,
            cfg,
        })
    }

    /// Splits a clip `[f, h, w]` into per-frame patches `[f * n_patches,
    /// patch_pixels]`.
    pub fn patchify_clip(&self, clip: &[Real]) -> Result<Vec<Real>> {
        let c = &self.cfg;
        let (fs, p) = (c.frame_size, c.patch);
        if clip.len() != c.pixels() {
            return Err(Error::shape("patchify_clip", format!("{} vs {}", clip.len(), c.pixels())));
        }
        let side = fs / p;
        let mut out = Vec::with_capacity(clip.len());
        for f in 0..c.clip_len {
            let frame = &clip[f * fs * fs..(f + 1) * fs * fs];
            for pi in 0..side {
                for pj in 0..side {
                    for r in 0..p {
                        let row = pi * p + r;
                        let col = pj * p;
                        out.extend_from_slice(&frame[row * fs + col..row * fs + col + p]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Denoiser::patchify_clip`].
    pub fn depatchify_clip(&self, patches: &[Real]) -> Result<Vec<Real>> {
        let c = &self.cfg;
        let (fs, p) = (c.frame_size, c.patch);
        if patches.len() != c.pixels() {
            return Err(Error::shape("depatchify_clip", format!("{} vs {}", patches.len(), c.pixels())));
        }
        let side = fs / p;
        let mut out = vec![0.0 as Real; patches.len()];
        let mut cursor = 0usize;
        for f in 0..c.clip_len {
            let base = f * fs * fs;
            for pi in 0..side {
                for pj in 0..side {
                    for r in 0..p {
                        let row = pi * p + r;
                        let col = pj * p;
                        out[base + row * fs + col..base + row * fs + col + p]
                            .copy_from_slice(&patches[cursor..cursor + p]);
                        cursor += p;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward pass on noisy patches.
    ///
    /// `x_patches`: `[b, seq, patch_pixels]` (constants), `timesteps`: one t
    /// per sample, `cond`: `[b, 2 n_q, token_dim]` deep tokens (head set
    /// then rear set), `drop`: per-sample condition drop flags.
    pub fn forward(
        &self,
        t: &Tape,
        ps: &ParamSet,
        x_patches: Tensor,
        timesteps: &[usize],
        cond: Tensor,
        drop: &[bool],
    ) -> Result<Tensor> {
        let c = &self.cfg;
        let xs = t.shape_of(x_patches);
        if xs.len() != 3 || xs[1] != c.seq_len() || xs[2] != c.patch_pixels() {
            return Err(Error::shape("denoiser", format!("x {:?} vs [b, {}, {}]", xs, c.seq_len(), c.patch_pixels())));
        }
        let b = xs[0];
        if timesteps.len() != b || drop.len() != b {
            return Err(Error::shape("denoiser", "timesteps/drop length vs batch"));
        }
        let cs = t.shape_of(cond);
        if cs != vec![b, c.cond_len(), c.token_dim] {
            return Err(Error::shape("denoiser", format!("cond {:?} vs [b, {}, {}]", cs, c.cond_len(), c.token_dim)));
        }

        let mut x = self.patch_embed.forward(t, ps, x_patches)?;
        // (frame, patch) position table for the full sequence.
        let np = c.n_patches();
        let frame_idx: Vec<usize> = (0..c.clip_len).flat_map(|f| std::iter::repeat(f).take(np)).collect();
        let patch_idx: Vec<usize> = (0..c.clip_len).flat_map(|_| 0..np).collect();
        let fpos = t.gather_rows(t.param(ps, self.frame_pos)?, &frame_idx)?;
        let ppos = t.gather_rows(t.param(ps, self.patch_pos)?, &patch_idx)?;
        x = t.add(x, t.add(fpos, ppos)?)?;

        // Timestep embedding, one per sample, added to every token.
        let mut time_data = Vec::with_capacity(b * c.width);
        for &ts in timesteps {
            time_data.extend(timestep_embedding(ts, c.width, 10_000.0));
        }
        let temb = t.constant(&[b, c.width], time_data)?;
        let temb = self.time_l2.forward(t, ps, t.gelu(self.time_l1.forward(t, ps, temb)?)?)?;
        x = t.add(x, t.reshape(temb, &[b, 1, c.width])?)?;

        // Condition tokens: project, mark head/rear, then swap in the null
        // token where the condition is dropped.
        let mut cond_x = self.cond_proj.forward(t, ps, cond)?;
        let boundary_idx: Vec<usize> = std::iter::repeat(0)
            .take(c.n_queries)
            .chain(std::iter::repeat(1).take(c.n_queries))
            .collect();
        let bemb = t.gather_rows(t.param(ps, self.boundary_embed)?, &boundary_idx)?;
        cond_x = t.add(cond_x, bemb)?;
        if drop.iter().any(|&d| d) {
            let mask: Vec<Real> = drop.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
            let mask = t.constant(&[b, 1, 1], mask)?;
            let keep = t.add_scalar(t.neg(mask)?, 1.0)?;
            let null = t.param(ps, self.null_cond)?;
            cond_x = t.add(t.mul(cond_x, keep)?, t.mul(null, mask)?)?;
        }

        for blk in &self.blocks {
            x = blk.forward(t, ps, x, Some(cond_x))?;
        }
        x = self.norm.forward(t, ps, x)?;
        self.out.forward(t, ps, x)
    }
}

/// Training loss given a prediction tensor: mean squared error against the
/// v (or eps) target derived from `(clips, timesteps, eps)`.
pub fn denoising_loss_core(
    t: &Tape,
    schedule: &NoiseSchedule,
    prediction: Tensor,
    clips: &[Real],
    b: usize,
    timesteps: &[usize],
    eps: &[Real],
    target: PredictTarget,
) -> Result<Tensor> {
    let per = clips.len() / b;
    let mut targets = Vec::with_capacity(clips.len());
    for i in 0..b {
        let x0 = &clips[i * per..(i + 1) * per];
        let e = &eps[i * per..(i + 1) * per];
        let ab = schedule.at(timesteps[i])?;
        match target {
            PredictTarget::V => targets.extend(v_target_with(x0, e, ab)),
            PredictTarget::Eps => targets.extend_from_slice(e),
        }
    }
    let shape = t.shape_of(prediction);
    let tt = t.constant(&shape, targets)?;
    t.mse(prediction, tt)
}

/// Draws per-sample timesteps, noise, and condition-drop flags, runs the
/// denoiser, and returns the scalar denoising loss. `cond` stays on the tape
/// so the tokenizer trains jointly through it.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    t: &Tape,
    ps: &ParamSet,
    den: &Denoiser,
    schedule: &NoiseSchedule,
    clips: &[Real],
    b: usize,
    cond: Tensor,
    rng: &mut Prng,
) -> Result<Tensor> {
    let c = &den.cfg;
    if clips.len() != b * c.pixels() / c.clip_len * c.clip_len {
        return Err(Error::shape("diffusion_loss", "clips length vs batch"));
    }
    let per = c.pixels();
    let mut timesteps = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(clips.len());
    let mut drop = Vec::with_capacity(b);
    let mut x_patches = Vec::with_capacity(b * c.seq_len() * c.patch_pixels());
    for i in 0..b {
        let ts = 1 + rng.below(schedule.steps);
        let e = rng.normal_vec(per);
        let x0 = &clips[i * per..(i + 1) * per];
        let xt = q_sample(schedule, x0, ts, &e)?;
        x_patches.extend(den.patchify_clip(&xt)?);
        timesteps.push(ts);
        eps.extend(e);
        drop.push(rng.bernoulli(c.cond_drop));
    }
    let xp = t.constant(&[b, c.seq_len(), c.patch_pixels()], x_patches)?;
    let pred = den.forward(t, ps, xp, &timesteps, cond, &drop)?;
    // Targets are compared in patch layout to match the prediction.
    let mut patched_clips = Vec::with_capacity(clips.len());
    let mut patched_eps = Vec::with_capacity(clips.len());
    for i in 0..b {
        patched_clips.extend(den.patchify_clip(&clips[i * per..(i + 1) * per])?);
        patched_eps.extend(den.patchify_clip(&eps[i * per..(i + 1) * per])?);
    }
    denoising_loss_core(t, schedule, pred, &patched_clips, b, &timesteps, &patched_eps, c.target)
}

pub fn sample_drop_mask(rng: &mut Prng, n: usize, rate: Real) -> Vec<bool> {
    (0..n).map(|_| rng.bernoulli(rate)).collect()
}

/// Anything that can predict v from a noisy clip; lets tests drive the DDIM
/// loop with an analytic oracle instead of a trained network.
pub trait VPredictor {
    /// `x_t` is `[f, h, w]` flattened; returns v of the same shape.
    fn predict(&self, x_t: &[Real], t: usize, uncond: bool) -> Result<Vec<Real>>;
}

/// The trained denoiser conditioned on a fixed pair of boundary token sets.
pub struct ConditionedDenoiser<'a> {
    pub den: &'a Denoiser,
    pub ps: &'a ParamSet,
    /// `[2 n_q, token_dim]` values: head tokens then rear tokens.
    pub cond: Vec<Real>,
}

impl VPredictor for ConditionedDenoiser<'_> {
    fn predict(&self, x_t: &[Real], t: usize, uncond: bool) -> Result<Vec<Real>> {
        let c = &self.den.cfg;
        let tape = Tape::new();
        let xp = tape.constant(&[1, c.seq_len(), c.patch_pixels()], self.den.patchify_clip(x_t)?)?;
        let cond = tape.constant(&[1, c.cond_len(), c.token_dim], self.cond.clone())?;
        let v = self.den.forward(&tape, self.ps, xp, &[t], cond, &[uncond])?;
        self.den.depatchify_clip(&tape.data(v))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DdimOptions {
    pub steps: usize,
    pub cfg_scale: Real,
    pub rescale: Real,
    pub seed: u64,
}

/// Deterministic DDIM sampling (eta = 0). Classifier-free guidance combines
/// conditional and unconditional v-predictions; `rescale` blends the guided
/// prediction towards the conditional prediction's per-sample std.
pub fn ddim_sample(
    predictor: &dyn VPredictor,
    schedule: &NoiseSchedule,
    n_values: usize,
    opts: &DdimOptions,
) -> Result<Vec<Real>> {
    if opts.steps == 0 || opts.steps > schedule.steps {
        return Err(Error::invalid(
            "ddim_sample",
            format!("steps {} outside 1..={}", opts.steps, schedule.steps),
        ));
    }
    if opts.cfg_scale < 0.0 {
        return Err(Error::invalid("ddim_sample", "cfg_scale must be >= 0"));
    }
    if !(0.0..=1.0).contains(&opts.rescale) {
        return Err(Error::invalid("ddim_sample", "rescale must be in [0, 1]"));
    }
    let taus: Vec<usize> = (0..opts.steps)
        .map(|i| (i + 1) * schedule.steps / opts.steps)
        .collect();
    let mut rng = Prng::for_purpose(opts.seed, "ddim-init", 0);
    let mut x = rng.normal_vec(n_values);
    for i in (0..opts.steps).rev() {
        let t = taus[i];
        let ab = schedule.at(t)?;
        let prev_ab = if i > 0 { schedule.at(taus[i - 1])? } else { 1.0 };
        let v = if opts.cfg_scale == 1.0 {
            // Guidance formula reduces to the conditional prediction.
            predictor.predict(&x, t, false)?
        } else {
            let vc = predictor.predict(&x, t, false)?;
            let vu = predictor.predict(&x, t, true)?;
            let mut guided: Vec<Real> = vu
                .iter()
                .zip(vc.iter())
                .map(|(&u, &c)| u + opts.cfg_scale * (c - u))
                .collect();
            if opts.rescale > 0.0 {
                let std_of = |v: &[Real]| -> Real {
                    let mean = v.iter().sum::<Real>() / v.len() as Real;
                    let var = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<Real>() / v.len() as Real;
                    var.sqrt()
                };
                let sc = std_of(&vc);
                let sg = std_of(&guided);
                if sg > 0.0 {
                    let k = opts.rescale * (sc / sg) + (1.0 - opts.rescale);
                    for g in guided.iter_mut() {
                        *g *= k;
                    }
                }
            }
            guided
        };
        let x0 = x0_from_v(&x, &v, ab);
        let eps = eps_from_v(&x, &v, ab);
        x = q_sample_with(&x0, prev_ab, &eps);
    }
    Ok(x)
}

/// Peak signal-to-noise ratio in dB over a signal range of `peak`.
pub fn psnr(a: &[Real], b: &[Real], peak: Real) -> Real {
    let mse: Real =
        a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<Real>() / a.len() as Real;
    if mse == 0.0 {
        return Real::INFINITY;
    }
    10.0 * ((peak * peak) / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};

    #[test]
    fn schedule_shape_and_bounds() {
        let s = NoiseSchedule::default_train();
        assert_eq!(s.steps, 1000);
        assert!(s.at(1).unwrap() > 0.99);
        assert!(s.at(1000).unwrap() < 0.05);
        assert!(s.at(0).is_err());
        assert!(s.at(1001).is_err());
        s.validate().unwrap();
    }

    #[test]
    fn q_sample_limits() {
        let x0 = vec![1.0, -0.5];
        let eps = vec![0.3, 0.7];
        assert_eq!(q_sample_with(&x0, 1.0, &eps), x0);
        assert_eq!(q_sample_with(&x0, 0.0, &eps), eps);
        // ab = 0.25, x0 = 1, eps = 0 -> 0.5.
        assert_eq!(q_sample_with(&[1.0], 0.25, &[0.0]), vec![0.5]);
    }

    #[test]
    fn v_target_limits_and_roundtrip() {
        let x0 = vec![1.0, -0.5];
        let eps = vec![0.3, 0.7];
        assert_eq!(v_target_with(&x0, &eps, 1.0), eps);
        assert_eq!(v_target_with(&x0, &eps, 0.0), vec![-1.0, 0.5]);

        let schedule = NoiseSchedule::default_train();
        let mut rng = Prng::seeded(3);
        let x0 = rng.normal_vec(16);
        let eps = rng.normal_vec(16);
        for t in 1..=schedule.steps {
            let ab = schedule.at(t).unwrap();
            let xt = q_sample_with(&x0, ab, &eps);
            let v = v_target_with(&x0, &eps, ab);
            let x0r = x0_from_v(&xt, &v, ab);
            let epsr = eps_from_v(&xt, &v, ab);
            for i in 0..16 {
                assert!((x0r[i] - x0[i]).abs() < 1e-12, "t={t}");
                assert!((epsr[i] - eps[i]).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn loss_is_zero_for_exact_prediction_and_msq_for_zero() {
        let schedule = NoiseSchedule::default_train();
        let t = Tape::new();
        let mut rng = Prng::seeded(5);
        let clips = rng.normal_vec(24);
        let eps = rng.normal_vec(24);
        let timesteps = vec![17, 803];
        // Exact v-target prediction.
        let mut targets = Vec::new();
        for i in 0..2 {
            let ab = schedule.at(timesteps[i]).unwrap();
            targets.extend(v_target_with(&clips[i * 12..(i + 1) * 12], &eps[i * 12..(i + 1) * 12], ab));
        }
        let exact = t.constant(&[2, 12], targets.clone()).unwrap();
        let l = denoising_loss_core(&t, &schedule, exact, &clips, 2, &timesteps, &eps, PredictTarget::V).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 0.0);

        let zero = t.constant(&[2, 12], vec![0.0; 24]).unwrap();
        let l = denoising_loss_core(&t, &schedule, zero, &clips, 2, &timesteps, &eps, PredictTarget::V).unwrap();
        let want: Real = targets.iter().map(|&v| v * v).sum::<Real>() / 24.0;
        assert!((t.scalar(l).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn drop_fraction_matches_rate() {
        let mut rng = Prng::seeded(7);
        let mask = sample_drop_mask(&mut rng, 10_000, 0.05);
        let frac = mask.iter().filter(|&&d| d).count() as Real / 10_000.0;
        assert!((0.04..=0.06).contains(&frac), "fraction {frac}");
    }

    fn tiny_denoiser() -> (ParamSet, Denoiser) {
        let mut ps = ParamSet::new();
        let mut rng = Prng::seeded(11);
        let cfg = DenoiserConfig {
            frame_size: 8,
            patch: 4,
            clip_len: 2,
            width: 8,
            layers: 1,
            heads: 2,
            token_dim: 3,
            n_queries: 2,
            ..DenoiserConfig::default()
        };
        let den = Denoiser::new(&mut ps, &mut rng, cfg).unwrap();
        (ps, den)
    }

    #[test]
    fn patchify_roundtrip() {
        let (_, den) = tiny_denoiser();
        let mut rng = Prng::seeded(13);
        let clip = rng.normal_vec(den.cfg.pixels());
        let p = den.patchify_clip(&clip).unwrap();
        let back = den.depatchify_clip(&p).unwrap();
        assert_eq!(clip, back);
    }

    #[test]
    fn diffusion_loss_gradients_match_finite_differences() {
        let (mut ps, den) = tiny_denoiser();
        let schedule = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let mut rng = Prng::seeded(17);
        let clips = rng.normal_vec(den.cfg.pixels());
        let eps = rng.normal_vec(den.cfg.pixels());
        let cond_vals = rng.normal_vec(den.cfg.cond_len() * den.cfg.token_dim);
        let timesteps = vec![7usize];
        let xt = q_sample(&schedule, &clips, 7, &eps).unwrap();
        let ids = ps.ids();
        let report = check_gradients(&mut ps, &ids, &GradCheckOptions::default(), |t, ps| {
            let xp = t.constant(
                &[1, den.cfg.seq_len(), den.cfg.patch_pixels()],
                den.patchify_clip(&xt).unwrap(),
            )?;
            let cond = t.constant(&[1, den.cfg.cond_len(), den.cfg.token_dim], cond_vals.clone())?;
            let pred = den.forward(t, ps, xp, &timesteps, cond, &[false])?;
            let pc = den.patchify_clip(&clips).unwrap();
            let pe = den.patchify_clip(&eps).unwrap();
            denoising_loss_core(t, &schedule, pred, &pc, 1, &timesteps, &pe, PredictTarget::V)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    struct OracleV {
        x0: Vec<Real>,
        schedule_steps: usize,
        alpha: std::collections::HashMap<usize, Real>,
        uncond_calls: std::cell::Cell<usize>,
    }

    impl OracleV {
        fn new(x0: Vec<Real>, s: &NoiseSchedule) -> Self {
            let alpha = (1..=s.steps).map(|t| (t, s.at(t).unwrap())).collect();
            OracleV { x0, schedule_steps: s.steps, alpha, uncond_calls: std::cell::Cell::new(0) }
        }
    }

    impl VPredictor for OracleV {
        fn predict(&self, x_t: &[Real], t: usize, uncond: bool) -> Result<Vec<Real>> {
            if uncond {
                self.uncond_calls.set(self.uncond_calls.get() + 1);
            }
            assert!(t >= 1 && t <= self.schedule_steps);
            let ab = self.alpha[&t];
            // True v for a known x0: (sqrt(ab) x_t - x0) / sqrt(1 - ab).
            Ok(x_t
                .iter()
                .zip(self.x0.iter())
                .map(|(&xt, &x0)| (ab.sqrt() * xt - x0) / (1.0 - ab).sqrt())
                .collect())
        }
    }

    #[test]
    fn ddim_with_perfect_oracle_recovers_x0() {
        let schedule = NoiseSchedule::linear(40, 1e-3, 0.05).unwrap();
        let mut rng = Prng::seeded(19);
        let x0 = rng.normal_vec(12);
        let oracle = OracleV::new(x0.clone(), &schedule);
        let opts = DdimOptions { steps: 40, cfg_scale: 1.0, rescale: 0.0, seed: 5 };
        let out = ddim_sample(&oracle, &schedule, 12, &opts).unwrap();
        for i in 0..12 {
            assert!((out[i] - x0[i]).abs() < 1e-8, "{} vs {}", out[i], x0[i]);
        }
        // cfg_scale = 1 must never query the unconditional branch.
        assert_eq!(oracle.uncond_calls.get(), 0);
    }

    #[test]
    fn ddim_is_seed_deterministic_and_validates_options() {
        let (ps, den) = tiny_denoiser();
        let schedule = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let cond = vec![0.1 as Real; den.cfg.cond_len() * den.cfg.token_dim];
        let pred = ConditionedDenoiser { den: &den, ps: &ps, cond };
        let opts = DdimOptions { steps: 10, cfg_scale: 7.5, rescale: 0.7, seed: 23 };
        let a = ddim_sample(&pred, &schedule, den.cfg.pixels(), &opts).unwrap();
        let b = ddim_sample(&pred, &schedule, den.cfg.pixels(), &opts).unwrap();
        assert_eq!(a, b);

        let bad = DdimOptions { steps: 51, ..opts };
        assert!(ddim_sample(&pred, &schedule, den.cfg.pixels(), &bad).is_err());

        let other = DdimOptions { seed: 24, ..opts };
        let c = ddim_sample(&pred, &schedule, den.cfg.pixels(), &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn psnr_basics() {
        let a = vec![0.5, -0.5, 0.25, 0.0];
        assert_eq!(psnr(&a, &a, 2.0), Real::INFINITY);
        let b = vec![0.4, -0.5, 0.25, 0.0];
        let expect = 10.0 * ((4.0 as Real) / (0.01 / 4.0)).log10();
        assert!((psnr(&a, &b, 2.0) - expect).abs() < 1e-9);
    }
}
