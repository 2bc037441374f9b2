//! Deterministic synthetic video corpus: moving anti-aliased shapes on a
//! dark background, with captions generated from (and parseable back into)
//! the discrete scene attributes.
//!
//! Frames are stored quantised to 8 bits, matching the on-disk portable
//! graymap format exactly, so training from a loaded corpus is bit-identical
//! to training from a freshly generated one.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Real;

/// Words the caption grammar can emit; the text vocabulary is built from
/// these plus the padding/unknown markers.
pub const CAPTION_WORDS: &[&str] = &[
    "circle", "square", "moving", "holding", "still", "left", "right", "up", "down", "slowly",
    "quickly", "and",
];

/// Per-frame speed above which a shape counts as moving "quickly".
pub const FAST_SPEED: Real = 0.02 as Real;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ShapeKind {
    Circle,
    Square,
}

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            other => Err(Error::Data(format!("unknown shape `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Start position in the unit square.
    pub pos: (Real, Real),
    /// Displacement per frame, in frame widths.
    pub vel: (Real, Real),
    /// Radius (circle) or half-extent (square) as a fraction of frame width.
    pub size: Real,
    /// In [0.2, 1.0]; maps to pixel value `2 * intensity - 1`.
    pub intensity: Real,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub primary: ShapeSpec,
    pub secondary: Option<ShapeSpec>,
    /// Optional additive pixel noise, driven by the render seed.
    pub noise_std: Real,
}

/// Discrete attributes a caption encodes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MotionClass {
    Still,
    Moving { dir: &'static str, fast: bool },
}

pub fn motion_class(vel: (Real, Real)) -> MotionClass {
    let speed = (vel.0 * vel.0 + vel.1 * vel.1).sqrt();
    if speed == 0.0 {
        return MotionClass::Still;
    }
    let dir = if vel.0.abs() >= vel.1.abs() {
        if vel.0 < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if vel.1 < 0.0 {
        "up"
    } else {
        "down"
    };
    MotionClass::Moving { dir, fast: speed >= FAST_SPEED }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for s in self.shapes() {
            if s.size <= 0.0 || s.size >= 0.5 {
                return Err(Error::Data(format!("size {} out of (0, 0.5)", s.size)));
            }
            if !(0.0..=1.0).contains(&s.pos.0) || !(0.0..=1.0).contains(&s.pos.1) {
                return Err(Error::Data(format!("position {:?} outside unit square", s.pos)));
            }
            if !(0.2..=1.0).contains(&s.intensity) {
                return Err(Error::Data(format!("intensity {} out of [0.2, 1]", s.intensity)));
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> impl Iterator<Item = &ShapeSpec> {
        std::iter::once(&self.primary).chain(self.secondary.iter())
    }

    /// Deterministic caption, e.g. "circle moving right quickly".
    pub fn caption(&self) -> String {
        let clause = |s: &ShapeSpec| -> String {
            match motion_class(s.vel) {
                MotionClass::Still => format!("{} holding still", s.kind.word()),
                MotionClass::Moving { dir, fast } => format!(
                    "{} moving {} {}",
                    s.kind.word(),
                    dir,
                    if fast { "quickly" } else { "slowly" }
                ),
            }
        };
        match &self.secondary {
            None => clause(&self.primary),
            Some(s) => format!("{} and {}", clause(&self.primary), clause(s)),
        }
    }

    /// Canonical one-line serialisation; floats are written in shortest
    /// round-trip form so parsing reproduces them exactly.
    pub fn to_line(&self) -> String {
        let shape = |s: &ShapeSpec| {
            format!(
                "kind={} pos={},{} vel={},{} size={} intensity={}",
                s.kind.word(),
                s.pos.0,
                s.pos.1,
                s.vel.0,
                s.vel.1,
                s.size,
                s.intensity
            )
        };
        let mut line = shape(&self.primary);
        if let Some(s) = &self.secondary {
            let _ = write!(line, " | {}", shape(s));
        }
        let _ = write!(line, " ; noise={}", self.noise_std);
        line
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let (body, noise) = line
            .rsplit_once(" ; noise=")
            .ok_or_else(|| Error::Data(format!("bad spec line `{line}`")))?;
        let noise_std: Real = noise.parse().map_err(|_| Error::Data(format!("bad noise `{noise}`")))?;
        let parse_shape = |part: &str| -> Result<ShapeSpec> {
            let mut kind = None;
            let mut pos = None;
            let mut vel = None;
            let mut size = None;
            let mut intensity = None;
            for field in part.split(' ') {
                let (key, val) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Data(format!("bad field `{field}`")))?;
                let pair = |v: &str| -> Result<(Real, Real)> {
                    let (a, b) = v.split_once(',').ok_or_else(|| Error::Data(format!("bad pair `{v}`")))?;
                    Ok((
                        a.parse().map_err(|_| Error::Data(format!("bad number `{a}`")))?,
                        b.parse().map_err(|_| Error::Data(format!("bad number `{b}`")))?,
                    ))
                };
                match key {
                    "kind" => kind = Some(ShapeKind::parse(val)?),
                    "pos" => pos = Some(pair(val)?),
                    "vel" => vel = Some(pair(val)?),
                    "size" => size = Some(val.parse().map_err(|_| Error::Data("bad size".into()))?),
                    "intensity" => {
                        intensity = Some(val.parse().map_err(|_| Error::Data("bad intensity".into()))?)
                    }
                    other => return Err(Error::Data(format!("unknown field `{other}`"))),
                }
            }
            Ok(ShapeSpec {
                kind: kind.ok_or_else(|| Error::Data("missing kind".into()))?,
                pos: pos.ok_or_else(|| Error::Data("missing pos".into()))?,
                vel: vel.ok_or_else(|| Error::Data("missing vel".into()))?,
                size: size.ok_or_else(|| Error::Data("missing size".into()))?,
                intensity: intensity.ok_or_else(|| Error::Data("missing intensity".into()))?,
            })
        };
        let (primary, secondary) = match body.split_once(" | ") {
            Some((a, b)) => (parse_shape(a)?, Some(parse_shape(b)?)),
            None => (parse_shape(body)?, None),
        };
        Ok(SceneSpec { primary, secondary, noise_std })
    }

    /// FNV-1a hash of the canonical serialisation; used as the clip id.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_line().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Parses a caption back into the discrete attributes it encodes.
pub fn parse_caption(caption: &str) -> Result<Vec<(ShapeKind, MotionClass)>> {
    caption
        .split(" and ")
        .map(|clause| {
            let words: Vec<&str> = clause.split(' ').collect();
            match words.as_slice() {
                [kind, "holding", "still"] => Ok((ShapeKind::parse(kind)?, MotionClass::Still)),
                [kind, "moving", dir, speed] => {
                    let dir = match *dir {
                        "left" => "left",
                        "right" => "right",
                        "up" => "up",
                        "down" => "down",
                        other => return Err(Error::Data(format!("unknown direction `{other}`"))),
                    };
                    let fast = match *speed {
                        "quickly" => true,
                        "slowly" => false,
                        other => return Err(Error::Data(format!("unknown speed `{other}`"))),
                    };
                    Ok((ShapeKind::parse(kind)?, MotionClass::Moving { dir, fast }))
                }
                _ => Err(Error::Data(format!("unparseable clause `{clause}`"))),
            }
        })
        .collect()
}

/// Position of a shape centre at frame `t`, with elastic reflection at the
/// borders. Computed in closed form (triangle-wave fold) so it is exact even
/// after many bounces.
pub fn position_at(shape: &ShapeSpec, t: usize) -> (Real, Real) {
    let fold = |p0: Real, v: Real, size: Real| -> Real {
        let lo = size;
        let hi = 1.0 - size;
        if hi <= lo {
            return 0.5;
        }
        let u = p0 + v * t as Real;
        if (lo..=hi).contains(&u) {
            return u;
        }
        let period = 2.0 * (hi - lo);
        let m = (u - lo).rem_euclid(period);
        lo + m.min(period - m)
    };
    (
        fold(shape.pos.0, shape.vel.0, shape.size),
        fold(shape.pos.1, shape.vel.1, shape.size),
    )
}

/// Renders `n_frames` frames of `h` x `w` grayscale pixels in [-1, 1].
/// Deterministic given `(spec, seed)`; the seed only drives optional noise.
pub fn render(spec: &SceneSpec, n_frames: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Real>> {
    spec.validate()?;
    if n_frames == 0 {
        return Err(Error::Data("cannot render an empty clip".into()));
    }
    let aa = 1.0 / w as Real;
    let mut frames = vec![-1.0 as Real; n_frames * h * w];
    for t in 0..n_frames {
        let frame = &mut frames[t * h * w..(t + 1) * h * w];
        for shape in spec.shapes() {
            let (cx, cy) = position_at(shape, t);
            let value = 2.0 * shape.intensity - 1.0;
            for i in 0..h {
                let y = (i as Real + 0.5) / h as Real;
                for j in 0..w {
                    let x = (j as Real + 0.5) / w as Real;
                    let coverage = match shape.kind {
                        ShapeKind::Circle => {
                            let d = ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt();
                            ((shape.size - d) / aa + 0.5).clamp(0.0, 1.0)
                        }
                        ShapeKind::Square => {
                            let fx = ((shape.size - (x - cx).abs()) / aa + 0.5).clamp(0.0, 1.0);
                            let fy = ((shape.size - (y - cy).abs()) / aa + 0.5).clamp(0.0, 1.0);
                            fx * fy
                        }
                    };
                    let px = &mut frame[i * w + j];
                    let blended = -1.0 + coverage * (value + 1.0);
                    if blended > *px {
                        *px = blended;
                    }
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let mut rng = Prng::for_purpose(seed, "render-noise", spec.hash());
        for v in frames.iter_mut() {
            *v = (*v + spec.noise_std * rng.normal()).clamp(-1.0, 1.0);
        }
    }
    Ok(frames)
}

/// Mean absolute inter-frame pixel difference, averaged over consecutive
/// pairs. Stands in for optical-flow magnitude as the motion score.
pub fn motion_score(frames: &[Real], n_frames: usize, pixels: usize) -> Result<Real> {
    if n_frames < 2 {
        return Err(Error::Data("motion score needs at least 2 frames".into()));
    }
    let mut total = 0.0 as Real;
    for t in 0..n_frames - 1 {
        let a = &frames[t * pixels..(t + 1) * pixels];
        let b = &frames[(t + 1) * pixels..(t + 2) * pixels];
        let mut acc = 0.0 as Real;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y).abs();
        }
        total += acc / pixels as Real;
    }
    Ok(total / (n_frames - 1) as Real)
}

/// One clip of the corpus; frames are stored 8-bit quantised.
#[derive(Clone)]
pub struct ClipData {
    pub id: String,
    pub spec: SceneSpec,
    pub frames: Vec<u8>,
    pub n_frames: usize,
    pub h: usize,
    pub w: usize,
    /// 0 for single-frame (image) entries.
    pub motion_score: Real,
}

pub fn quantize(v: Real) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0)) as u8
}

pub fn dequantize(q: u8) -> Real {
    q as Real / 255.0 * 2.0 - 1.0
}

impl ClipData {
    pub fn render(spec: SceneSpec, n_frames: usize, h: usize, w: usize, seed: u64) -> Result<Self> {
        let real = render(&spec, n_frames, h, w, seed)?;
        let frames: Vec<u8> = real.iter().map(|&v| quantize(v)).collect();
        let score = if n_frames >= 2 {
            let deq: Vec<Real> = frames.iter().map(|&q| dequantize(q)).collect();
            motion_score(&deq, n_frames, h * w)?
        } else {
            0.0
        };
        Ok(ClipData {
            id: format!("{:016x}", spec.hash()),
            spec,
            frames,
            n_frames,
            h,
            w,
            motion_score: score,
        })
    }

    pub fn frames_real(&self) -> Vec<Real> {
        self.frames.iter().map(|&q| dequantize(q)).collect()
    }

    pub fn frame_real(&self, t: usize) -> Vec<Real> {
        let px = self.h * self.w;
        self.frames[t * px..(t + 1) * px].iter().map(|&q| dequantize(q)).collect()
    }
}

#[derive(Clone)]
pub struct Corpus {
    pub clips: Vec<ClipData>,
}

impl Corpus {
    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }
}

/// Linear-interpolation percentile of unsorted scores, `p` in [0, 100].
pub fn percentile(scores: &[Real], p: Real) -> Result<Real> {
    if scores.is_empty() {
        return Err(Error::Data("percentile of empty set".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as Real;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as Real;
    Ok(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// Retains clips whose motion score lies in `[lo, hi]`. Returns the filtered
/// corpus and the retained fraction (an empty result is permitted).
pub fn filter_by_motion(corpus: &Corpus, lo: Real, hi: Real) -> Result<(Corpus, Real)> {
    if lo > hi {
        return Err(Error::Data(format!("lo {lo} > hi {hi}")));
    }
    let total = corpus.clips.len();
    let clips: Vec<ClipData> = corpus
        .clips
        .iter()
        .filter(|c| c.motion_score >= lo && c.motion_score <= hi)
        .cloned()
        .collect();
    let fraction = if total == 0 { 0.0 } else { clips.len() as Real / total as Real };
    Ok((Corpus { clips }, fraction))
}

#[derive(Clone, Copy, Debug)]
pub struct CorpusConfig {
    pub frame_size: usize,
    pub clip_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { frame_size: 32, clip_len: 64 }
    }
}

fn sample_shape(rng: &mut Prng) -> ShapeSpec {
    let kind = if rng.bernoulli(0.5) { ShapeKind::Circle } else { ShapeKind::Square };
    let size = rng.uniform_range(0.10, 0.20);
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU as Real);
    let speed = rng.uniform_range(0.005, 0.04);
    ShapeSpec {
        kind,
        pos: (rng.uniform_range(0.25, 0.75), rng.uniform_range(0.25, 0.75)),
        vel: (speed * angle.cos(), speed * angle.sin()),
        size,
        intensity: rng.uniform_range(0.5, 1.0),
    }
}

pub fn sample_spec(seed: u64, index: u64) -> SceneSpec {
    let mut rng = Prng::for_purpose(seed, "scene-spec", index);
    let primary = sample_shape(&mut rng);
    let secondary = if rng.bernoulli(0.3) { Some(sample_shape(&mut rng)) } else { None };
    SceneSpec { primary, secondary, noise_std: 0.0 }
}

pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    /// Single-frame corpus for the image pre-training stage.
    pub images: Corpus,
    pub manifest: String,
}

/// Builds disjoint train/val/test corpora plus an image-only corpus. Spec
/// indices never overlap between splits, and the manifest lists every spec
/// so a corpus can be regenerated exactly.
pub fn make_splits(
    cfg: &CorpusConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<Splits> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data("split sizes must be >= 1".into()));
    }
    let build = |start: u64, count: usize, frames: usize| -> Result<Vec<ClipData>> {
        let mut clips = Vec::with_capacity(count);
        for i in 0..count {
            let spec = sample_spec(seed, start + i as u64);
            clips.push(ClipData::render(spec, frames, cfg.frame_size, cfg.frame_size, seed)?);
        }
        // Canonical ordering: sorted by spec hash (== id).
        clips.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(clips)
    };
    let n_images = n_train;
    let train = build(0, n_train, cfg.clip_len)?;
    let val = build(n_train as u64, n_val, cfg.clip_len)?;
    let test = build((n_train + n_val) as u64, n_test, cfg.clip_len)?;
    let images = build((n_train + n_val + n_test) as u64, n_images, 1)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "corpus seed={} frame={} clip_len={}", seed, cfg.frame_size, cfg.clip_len);
    for (name, clips) in [("train", &train), ("val", &val), ("test", &test), ("images", &images)] {
        for c in clips {
            let _ = writeln!(manifest, "{name} {} {} :: {}", c.id, c.motion_score, c.spec.to_line());
        }
    }

    Ok(Splits {
        train: Corpus { clips: train },
        val: Corpus { clips: val },
        test: Corpus { clips: test },
        images: Corpus { clips: images },
        manifest,
    })
}

/// Writes one frame as a binary portable graymap.
pub fn write_pgm(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let raw = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| Error::Data("bad pgm".into()))?);
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Data("unsupported pgm header".into()));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Data("bad pgm width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Data("bad pgm height".into()))?;
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + w * h {
        return Err(Error::Data("truncated pgm".into()));
    }
    Ok((raw[pos..pos + w * h].to_vec(), h, w))
}

/// Writes a corpus tree: one directory per clip with pgm frames and the spec
/// line, plus the manifest at the root.
pub fn save_splits(root: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join("manifest.txt"), &splits.manifest)?;
    for (name, corpus) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
        ("images", &splits.images),
    ] {
        for clip in &corpus.clips {
            let dir = root.join(name).join(&clip.id);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("spec.txt"), format!("{}\n", clip.spec.to_line()))?;
            let px = clip.h * clip.w;
            for t in 0..clip.n_frames {
                write_pgm(
                    &dir.join(format!("frame_{t:03}.pgm")),
                    &clip.frames[t * px..(t + 1) * px],
                    clip.h,
                    clip.w,
                )?;
            }
        }
    }
    Ok(())
}

pub fn load_split(root: &Path, name: &str) -> Result<Corpus> {
    let manifest = fs::read_to_string(root.join("manifest.txt"))?;
    let mut clips = Vec::new();
    for line in manifest.lines().skip(1) {
        let (head, spec_line) = line
            .split_once(" :: ")
            .ok_or_else(|| Error::Data(format!("bad manifest line `{line}`")))?;
        let fields: Vec<&str> = head.split(' ').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!("bad manifest head `{head}`")));
        }
        if fields[0] != name {
            continue;
        }
        let id = fields[1];
        let score: Real = fields[2].parse().map_err(|_| Error::Data("bad score".into()))?;
        let spec = SceneSpec::from_line(spec_line)?;
        let dir = root.join(name).join(id);
        let mut frames = Vec::new();
        let mut t = 0usize;
        let (mut h, mut w) = (0usize, 0usize);
        loop {
            let p = dir.join(format!("frame_{t:03}.pgm"));
            if !p.exists() {
                break;
            }
            let (px, fh, fw) = read_pgm(&p)?;
            h = fh;
            w = fw;
            frames.extend_from_slice(&px);
            t += 1;
        }
        if t == 0 {
            return Err(Error::Data(format!("clip `{id}` has no frames")));
        }
        clips.push(ClipData {
            id: id.to_string(),
            spec,
            frames,
            n_frames: t,
            h,
            w,
            motion_score: score,
        });
    }
    if clips.is_empty() {
        return Err(Error::Data(format!("split `{name}` is empty or missing")));
    }
    Ok(Corpus { clips })
}
