//! Evaluation metrics: reconstruction PSNR baselines, feature-space Frechet
//! distance (with a Jacobi eigensolver for the matrix square root),
//! mode-coverage statistics, held-out NLL, and the bimodal toy sequence task
//! used to compare density heads against plain regression.

use crate::ar::{self, ArBatch, ArModel, LossMode, PAD_ID, TEXT_LEN};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Prng;
use crate::tensor::{Real, Tape};
use crate::tokenizer::{DeepTokenSet, Tokenizer};

pub use crate::diffusion::psnr;

/// Mean and covariance (unbiased) of `n` feature rows of width `d`.
pub fn fit_gaussian(features: &[Real], n: usize, d: usize) -> Result<(Vec<Real>, Vec<Real>)> {
    if n == 0 || features.len() != n * d {
        return Err(Error::shape("fit_gaussian", format!("{} values vs {n} x {d}", features.len())));
    }
    let mut mean = vec![0.0 as Real; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += features[r * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as Real;
    }
    let mut cov = vec![0.0 as Real; d * d];
    if n > 1 {
        for r in 0..n {
            for i in 0..d {
                let di = features[r * d + i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (features[r * d + j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as Real;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
    }
    Ok((mean, cov))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors.
pub fn jacobi_eigen(matrix: &[Real], d: usize) -> (Vec<Real>, Vec<Real>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0 as Real; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: Real = matrix.iter().map(|x| x.abs()).fold(0.0, Real::max).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0 as Real;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off.sqrt() < 1e-14 * scale * d as Real {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

fn matmul_sq(a: &[Real], b: &[Real], d: usize) -> Vec<Real> {
    let mut out = vec![0.0 as Real; d * d];
    for i in 0..d {
        for k in 0..d {
            let av = a[i * d + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += av * b[k * d + j];
            }
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix; tiny negative
/// eigenvalues from rounding are clamped to zero.
pub fn sqrtm_psd(matrix: &[Real], d: usize) -> Vec<Real> {
    let (eig, v) = jacobi_eigen(matrix, d);
    let mut out = vec![0.0 as Real; d * d];
    for (k, &lambda) in eig.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += s * v[i * d + k] * v[j * d + k];
            }
        }
    }
    out
}

/// Squared Frechet distance between two Gaussians:
/// `|m1 - m2|^2 + tr(c1 + c2 - 2 (c1^1/2 c2 c1^1/2)^1/2)`.
pub fn frechet_from_stats(m1: &[Real], c1: &[Real], m2: &[Real], c2: &[Real], d: usize) -> Real {
    let mut dist: Real = m1.iter().zip(m2.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let s1 = sqrtm_psd(c1, d);
    let inner = matmul_sq(&matmul_sq(&s1, c2, d), &s1, d);
    // Symmetrize against rounding before taking the root.
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = jacobi_eigen(&sym, d);
    let tr_sqrt: Real = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    for i in 0..d {
        dist += c1[i * d + i] + c2[i * d + i];
    }
    dist - 2.0 * tr_sqrt
}

/// Squared Frechet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Real], na: usize, b: &[Real], nb: usize, d: usize) -> Result<Real> {
    let (m1, c1) = fit_gaussian(a, na, d)?;
    let (m2, c2) = fit_gaussian(b, nb, d)?;
    Ok(frechet_from_stats(&m1, &c1, &m2, &c2, d))
}

/// Mean-pooled encoder features for a set of frames; the feature extractor
/// for the Frechet metric.
pub fn encoder_features(tok: &Tokenizer, ps: &ParamSet, frames: &[Vec<Real>]) -> Result<Vec<Real>> {
    let c = tok.cfg.feat_dim;
    let mut out = Vec::with_capacity(frames.len() * c);
    for f in frames {
        let feats = tok.encode_frame(ps, f, 0)?;
        for j in 0..c {
            let mut acc = 0.0 as Real;
            for p in 0..feats.n {
                acc += feats.features[p * c + j];
            }
            out.push(acc / feats.n as Real);
        }
    }
    Ok(out)
}

/// Coverage of a set of target modes by sample points.
pub struct ModeCoverage {
    /// Fraction of samples within `radius` of their nearest mode.
    pub within_radius: Real,
    /// Fraction of samples whose nearest mode is mode k.
    pub hit_fraction: Vec<Real>,
    /// Mean distance to the nearest mode.
    pub mean_nearest: Real,
    /// Mean distance to each mode over all samples.
    pub mean_distance: Vec<Real>,
}

pub fn mode_coverage(samples: &[Vec<Real>], modes: &[Vec<Real>], radius: Real) -> Result<ModeCoverage> {
    if samples.is_empty() || modes.is_empty() {
        return Err(Error::invalid("mode_coverage", "empty samples or modes"));
    }
    let dist = |a: &[Real], b: &[Real]| -> Real {
        a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<Real>().sqrt()
    };
    let mut hits = vec![0usize; modes.len()];
    let mut within = 0usize;
    let mut nearest_acc = 0.0 as Real;
    let mut per_mode = vec![0.0 as Real; modes.len()];
    for s in samples {
        let mut best = Real::INFINITY;
        let mut best_k = 0;
        for (k, m) in modes.iter().enumerate() {
            let d = dist(s, m);
            per_mode[k] += d;
            if d < best {
                best = d;
                best_k = k;
            }
        }
        hits[best_k] += 1;
        nearest_acc += best;
        if best <= radius {
            within += 1;
        }
    }
    let n = samples.len() as Real;
    Ok(ModeCoverage {
        within_radius: within as Real / n,
        hit_fraction: hits.iter().map(|&h| h as Real / n).collect(),
        mean_nearest: nearest_acc / n,
        mean_distance: per_mode.into_iter().map(|d| d / n).collect(),
    })
}

/// Teacher-forced mean NLL (or MSE for L2 heads) without input drop.
pub fn held_out_loss(model: &ArModel, ps: &ParamSet, batches: &[ArBatch]) -> Result<Real> {
    let mut total = 0.0 as Real;
    let mut count = 0usize;
    for batch in batches {
        let t = Tape::new();
        let loss = ar::nll_step(model, &t, ps, batch, LossMode::Standard)?;
        total += t.scalar(loss)?;
        count += 1;
    }
    Ok(total / count.max(1) as Real)
}

// ---------------------------------------------------------------------------
// Bimodal toy sequence task
// ---------------------------------------------------------------------------

/// Geometry of the bimodal token task: every token of every frame is drawn
/// from one of two well-separated modes with small isotropic noise. A
/// density head should learn both modes; a plain L2 head can only predict
/// their midpoint.
pub struct BimodalTask {
    pub dim: usize,
    pub n_queries: usize,
    pub n_frames: usize,
    pub mode: Real,
    pub sigma: Real,
}

impl Default for BimodalTask {
    fn default() -> Self {
        BimodalTask { dim: 2, n_queries: 2, n_frames: 2, mode: 3.0, sigma: 0.05 }
    }
}

impl BimodalTask {
    pub fn modes(&self) -> Vec<Vec<Real>> {
        vec![vec![self.mode; self.dim], vec![-self.mode; self.dim]]
    }

    pub fn inter_mode_distance(&self) -> Real {
        2.0 * self.mode * (self.dim as Real).sqrt()
    }

    fn all_pad_text(&self) -> Vec<usize> {
        vec![PAD_ID; TEXT_LEN]
    }

    /// One sequence: each token flips a fair coin for its mode. The
    /// returned pair is antithetic (the mirror has every value negated), so
    /// a corpus built from pairs has an exactly zero empirical mean.
    pub fn sequence_pair(&self, seed: u64, index: u64) -> (Vec<DeepTokenSet>, Vec<DeepTokenSet>) {
        let mut rng = Prng::for_purpose(seed, "bimodal-seq", index);
        let mut seq = Vec::with_capacity(self.n_frames);
        let mut mirror = Vec::with_capacity(self.n_frames);
        for f in 0..self.n_frames {
            let mut vals = Vec::with_capacity(self.n_queries * self.dim);
            for _ in 0..self.n_queries {
                let sign: Real = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                for _ in 0..self.dim {
                    vals.push(sign * self.mode + self.sigma * rng.normal());
                }
            }
            let neg: Vec<Real> = vals.iter().map(|&v| -v).collect();
            seq.push(DeepTokenSet { frame_index: f, tokens: vals, n_q: self.n_queries, c: self.dim });
            mirror.push(DeepTokenSet { frame_index: f, tokens: neg, n_q: self.n_queries, c: self.dim });
        }
        (seq, mirror)
    }

    /// `n_pairs * 2` sequences with exact mode balance.
    pub fn corpus(&self, seed: u64, n_pairs: usize) -> Vec<Vec<DeepTokenSet>> {
        let mut out = Vec::with_capacity(n_pairs * 2);
        for i in 0..n_pairs {
            let (a, b) = self.sequence_pair(seed, i as u64);
            out.push(a);
            out.push(b);
        }
        out
    }

    /// Teacher-forcing batch over corpus indices (all-pad text prefix).
    pub fn batch(&self, corpus: &[Vec<DeepTokenSet>], idx: &[usize], drop: Vec<Vec<bool>>) -> ArBatch {
        ArBatch {
            text_ids: idx.iter().map(|_| self.all_pad_text()).collect(),
            sequences: idx.iter().map(|&i| corpus[i].clone()).collect(),
            drop,
        }
    }

    /// All tokens of generated sequences as flat points.
    pub fn flatten_tokens(sets: &[Vec<DeepTokenSet>]) -> Vec<Vec<Real>> {
        let mut out = Vec::new();
        for seq in sets {
            for ts in seq {
                for m in 0..ts.n_q {
                    out.push(ts.tokens[m * ts.c..(m + 1) * ts.c].to_vec());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_eigenvalues() {
        let m = vec![2.0, 1.0, 1.0, 2.0];
        let (mut eig, v) = jacobi_eigen(&m, 2);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
        // Eigenvectors reconstruct the matrix.
        let (eigu, _) = jacobi_eigen(&m, 2);
        let mut rec = vec![0.0; 4];
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    rec[i * 2 + j] += eigu[k] * v[i * 2 + k] * v[j * 2 + k];
                }
            }
        }
        for (a, b) in rec.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.0, 0.5, 0.0, 2.0];
        let s = sqrtm_psd(&m, 3);
        let sq = matmul_sq(&s, &s, 3);
        for (a, b) in sq.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn frechet_self_distance_is_zero() {
        let mut rng = Prng::seeded(3);
        let n = 40;
        let d = 5;
        let feats = rng.normal_vec(n * d);
        let fd = frechet_distance(&feats, n, &feats, n, d).unwrap();
        assert!(fd.abs() < 1e-8, "self distance {fd}");
    }

    #[test]
    fn frechet_matches_diagonal_closed_form() {
        // Commuting (diagonal) covariances: fd = |dm|^2 + sum (sqrt(a) - sqrt(b))^2.
        let m1 = vec![0.0, 1.0];
        let m2 = vec![2.0, -1.0];
        let c1 = vec![4.0, 0.0, 0.0, 9.0];
        let c2 = vec![1.0, 0.0, 0.0, 16.0];
        let fd = frechet_from_stats(&m1, &c1, &m2, &c2, 2);
        let want = (4.0 + 4.0) as Real + (2.0 - 1.0) as Real * (2.0 - 1.0) + (3.0 - 4.0) as Real * (3.0 - 4.0);
        assert!((fd - want).abs() < 1e-9, "{fd} vs {want}");
    }

    #[test]
    fn frechet_grows_with_mean_shift() {
        let mut rng = Prng::seeded(9);
        let n = 400;
        let d = 3;
        let base = rng.normal_vec(n * d);
        let near: Vec<Real> = base.iter().map(|&v| v + 0.1).collect();
        let far: Vec<Real> = base.iter().map(|&v| v + 2.0).collect();
        let fd_near = frechet_distance(&base, n, &near, n, d).unwrap();
        let fd_far = frechet_distance(&base, n, &far, n, d).unwrap();
        assert!(fd_near < fd_far);
        assert!((fd_far - 12.0).abs() < 1.0, "roughly |shift|^2 = 12, got {fd_far}");
    }

    #[test]
    fn mode_coverage_counts() {
        let modes = vec![vec![3.0, 3.0], vec![-3.0, -3.0]];
        let samples = vec![
            vec![3.05, 3.0],
            vec![-3.0, -3.1],
            vec![0.0, 0.0],
            vec![2.9, 3.0],
        ];
        let c = mode_coverage(&samples, &modes, 0.2).unwrap();
        assert!((c.within_radius - 0.75).abs() < 1e-12);
        assert!((c.hit_fraction[0] - 0.75).abs() < 1e-12 || (c.hit_fraction[0] - 0.5).abs() < 1e-12);
        assert_eq!(c.mean_distance.len(), 2);
    }

    #[test]
    fn bimodal_corpus_is_exactly_balanced() {
        let task = BimodalTask::default();
        let corpus = task.corpus(5, 32);
        assert_eq!(corpus.len(), 64);
        // Every even sequence has an exact negation right after it.
        for pair in corpus.chunks(2) {
            for (a, b) in pair[0].iter().zip(pair[1].iter()) {
                for (x, y) in a.tokens.iter().zip(b.tokens.iter()) {
                    assert_eq!(*x, -*y);
                }
            }
        }
        // Tokens sit near one of the two modes.
        let pts = BimodalTask::flatten_tokens(&corpus);
        let cov = mode_coverage(&pts, &task.modes(), 0.2).unwrap();
        assert!(cov.within_radius > 0.99, "{}", cov.within_radius);
    }
}
