//! Density heads over continuous tokens: plain L2 regression, a diagonal
//! Gaussian, and a k-component diagonal Gaussian mixture trained by negative
//! log-likelihood.
//!
//! The mixture NLL is evaluated in the log domain (`logsumexp` over
//! per-component log densities); the linear-domain formulation survives only
//! as a brute-force oracle in the tests. Variances are parameterised by
//! softplus plus a floor, weights by softmax, so raw head outputs can be any
//! real vector.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Real, Tape, Tensor, LN_2PI};

pub const VAR_FLOOR: Real = 1e-6 as Real;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HeadKind {
    L2,
    Gaussian,
    Gmm,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(HeadKind::L2),
            "gaussian" => Ok(HeadKind::Gaussian),
            "gmm" => Ok(HeadKind::Gmm),
            other => Err(Error::Config(format!("unknown head kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::L2 => "l2",
            HeadKind::Gaussian => "gaussian",
            HeadKind::Gmm => "gmm",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Mixture components; ignored for L2 and Gaussian.
    pub k: usize,
    /// Token dimension.
    pub dim: usize,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, k: usize, dim: usize) -> Self {
        HeadConfig { kind, k, dim }
    }

    /// Width of the raw head output.
    pub fn param_count(&self) -> usize {
        match self.kind {
            HeadKind::L2 => self.dim,
            HeadKind::Gaussian => 2 * self.dim,
            HeadKind::Gmm => 2 * self.k * self.dim + self.k,
        }
    }

    pub fn components(&self) -> usize {
        match self.kind {
            HeadKind::Gmm => self.k,
            _ => 1,
        }
    }
}

/// Mixture parameters for one token: `k` diagonal Gaussians over `d` dims.
#[derive(Clone, Debug)]
pub struct MixtureParams {
    pub means: Vec<Real>,
    pub vars: Vec<Real>,
    pub weights: Vec<Real>,
    pub k: usize,
    pub d: usize,
}

impl MixtureParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("mixture_params", "k must be >= 1"));
        }
        if self.means.len() != self.k * self.d || self.vars.len() != self.k * self.d || self.weights.len() != self.k {
            return Err(Error::shape("mixture_params", "field lengths do not match k x d"));
        }
        if self.vars.iter().any(|&v| v < VAR_FLOOR) {
            return Err(Error::invalid("mixture_params", "variance below floor"));
        }
        let sum: Real = self.weights.iter().sum();
        if (sum - 1.0).abs() >= 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("mixture_params", format!("weights sum to {sum}")));
        }
        Ok(())
    }

    /// Log-domain NLL of a single length-d target, host-side.
    pub fn nll(&self, x: &[Real]) -> Result<Real> {
        if x.len() != self.d {
            return Err(Error::shape("mixture_nll", format!("target {} vs d {}", x.len(), self.d)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "mixture_nll" });
        }
        let mut best = Real::NEG_INFINITY;
        let mut joint = vec![0.0 as Real; self.k];
        for c in 0..self.k {
            let mut log_n = -0.5 * self.d as Real * LN_2PI;
            for j in 0..self.d {
                let m = self.means[c * self.d + j];
                let v = self.vars[c * self.d + j];
                log_n -= 0.5 * ((x[j] - m) * (x[j] - m) / v + v.ln());
            }
            joint[c] = self.weights[c].ln() + log_n;
            best = best.max(joint[c]);
        }
        let s: Real = joint.iter().map(|&j| (j - best).exp()).sum();
        Ok(-(best + s.ln()))
    }
}

/// Maps a raw head output to mixture parameters (host-side). Means pass
/// through; variances go through softplus plus the floor; weights through
/// softmax.
pub fn raw_to_params(raw: &[Real], cfg: &HeadConfig) -> Result<MixtureParams> {
    if raw.len() != cfg.param_count() {
        return Err(Error::shape(
            "raw_to_params",
            format!("raw length {} vs required {}", raw.len(), cfg.param_count()),
        ));
    }
    let softplus = |x: Real| crate::tensor::ops::softplus_fwd(x) + VAR_FLOOR;
    let (k, d) = (cfg.components(), cfg.dim);
    match cfg.kind {
        HeadKind::L2 => Ok(MixtureParams {
            means: raw.to_vec(),
            vars: vec![VAR_FLOOR; d],
            weights: vec![1.0],
            k: 1,
            d,
        }),
        HeadKind::Gaussian => Ok(MixtureParams {
            means: raw[..d].to_vec(),
            vars: raw[d..].iter().map(|&v| softplus(v)).collect(),
            weights: vec![1.0],
            k: 1,
            d,
        }),
        HeadKind::Gmm => {
            let means = raw[..k * d].to_vec();
            let vars: Vec<Real> = raw[k * d..2 * k * d].iter().map(|&v| softplus(v)).collect();
            let logits = &raw[2 * k * d..];
            let m = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let exps: Vec<Real> = logits.iter().map(|&l| (l - m).exp()).collect();
            let s: Real = exps.iter().sum();
            let weights = exps.iter().map(|&e| e / s).collect();
            Ok(MixtureParams { means, vars, weights, k, d })
        }
    }
}

/// Tape handles of per-position mixture parameters.
pub struct GmmTensors {
    /// `[p, k, d]`
    pub means: Tensor,
    /// `[p, k, d]`, already floored.
    pub vars: Tensor,
    /// `[p, k]` log mixture weights.
    pub log_weights: Tensor,
}

/// Splits a `[p, width]` raw head output into differentiable mixture
/// parameters. Weight logits go through a stable log-softmax.
pub fn raw_to_tensors(t: &Tape, raw: Tensor, cfg: &HeadConfig) -> Result<GmmTensors> {
    let shape = t.shape_of(raw);
    if shape.len() != 2 || shape[1] != cfg.param_count() {
        return Err(Error::shape(
            "raw_to_tensors",
            format!("raw shape {:?} vs [p, {}]", shape, cfg.param_count()),
        ));
    }
    let p = shape[0];
    let (k, d) = (cfg.components(), cfg.dim);
    match cfg.kind {
        HeadKind::L2 => Err(Error::invalid("raw_to_tensors", "L2 head has no distribution parameters")),
        HeadKind::Gaussian => {
            let means = t.reshape(t.slice(raw, 1, 0, d)?, &[p, 1, d])?;
            let rv = t.slice(raw, 1, d, d)?;
            let vars = t.reshape(t.add_scalar(t.softplus(rv)?, VAR_FLOOR)?, &[p, 1, d])?;
            let log_weights = t.constant(&[1, 1], vec![0.0])?;
            Ok(GmmTensors { means, vars, log_weights })
        }
        HeadKind::Gmm => {
            let means = t.reshape(t.slice(raw, 1, 0, k * d)?, &[p, k, d])?;
            let rv = t.slice(raw, 1, k * d, k * d)?;
            let vars = t.reshape(t.add_scalar(t.softplus(rv)?, VAR_FLOOR)?, &[p, k, d])?;
            let logits = t.slice(raw, 1, 2 * k * d, k)?;
            let lse = t.reshape(t.logsumexp(logits, 1)?, &[p, 1])?;
            let log_weights = t.sub(logits, lse)?;
            Ok(GmmTensors { means, vars, log_weights })
        }
    }
}

/// Mean negative log-likelihood of targets `x` (`[p, d]`) under per-position
/// mixtures. Parameter tensors may have a leading extent of 1 to share one
/// mixture across all targets.
pub fn mixture_nll(t: &Tape, params: &GmmTensors, x: Tensor) -> Result<Tensor> {
    let xs = t.shape_of(x);
    if xs.len() != 2 {
        return Err(Error::shape("mixture_nll", format!("targets must be [p, d], got {:?}", xs)));
    }
    let (p, d) = (xs[0], xs[1]);
    let xr = t.reshape(x, &[p, 1, d])?;
    let diff = t.sub(xr, params.means)?;
    let sq = t.mul(diff, diff)?;
    let q = t.div(sq, params.vars)?;
    let lv = t.log(params.vars)?;
    let s = t.sum_axis(t.add(q, lv)?, 2)?;
    let comp = t.add_scalar(t.scale(s, -0.5)?, -0.5 * d as Real * LN_2PI)?;
    let joint = t.add(comp, params.log_weights)?;
    let lse = t.logsumexp(joint, 1)?;
    t.mean_all(t.neg(lse)?)
}

/// Negative log-likelihood under a k-component diagonal mixture with shared
/// parameters: means/vars `[k, d]`, weights `[k]` (probabilities), targets
/// `[n, d]` or `[d]`. Returns the mean over targets.
pub fn gmm_nll(t: &Tape, means: Tensor, vars: Tensor, weights: Tensor, x: Tensor) -> Result<Tensor> {
    let ms = t.shape_of(means);
    if ms.len() != 2 {
        return Err(Error::shape("gmm_nll", format!("means must be [k, d], got {:?}", ms)));
    }
    let (k, d) = (ms[0], ms[1]);
    {
        let vd = t.data_ref(vars);
        if vd.iter().any(|&v| v < VAR_FLOOR) {
            return Err(Error::invalid("gmm_nll", "variance below floor"));
        }
    }
    let xs = t.shape_of(x);
    let x2 = match xs.len() {
        1 => t.reshape(x, &[1, xs[0]])?,
        2 => x,
        _ => return Err(Error::shape("gmm_nll", format!("targets must be [d] or [n, d], got {:?}", xs))),
    };
    let params = GmmTensors {
        means: t.reshape(means, &[1, k, d])?,
        vars: t.reshape(vars, &[1, k, d])?,
        log_weights: t.reshape(t.log(weights)?, &[1, k])?,
    };
    mixture_nll(t, &params, x2)
}

/// Exact diagonal Gaussian NLL including the log-variance and `ln 2pi`
/// terms; a one-component mixture with unit weight.
pub fn gaussian_nll(t: &Tape, mean: Tensor, var: Tensor, x: Tensor) -> Result<Tensor> {
    {
        let vd = t.data_ref(var);
        if vd.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("gaussian_nll", "variance must be positive"));
        }
    }
    let ms = t.shape_of(mean);
    let d = *ms.last().ok_or_else(|| Error::shape("gaussian_nll", "rank-0 mean"))?;
    let lift = |v: Tensor| -> Result<Tensor> {
        let s = t.shape_of(v);
        match s.len() {
            1 => t.reshape(v, &[1, 1, d]),
            2 => t.reshape(v, &[s[0], 1, d]),
            _ => Err(Error::shape("gaussian_nll", format!("bad shape {:?}", s))),
        }
    };
    let xs = t.shape_of(x);
    let x2 = match xs.len() {
        1 => t.reshape(x, &[1, xs[0]])?,
        2 => x,
        _ => return Err(Error::shape("gaussian_nll", format!("bad target shape {:?}", xs))),
    };
    let params = GmmTensors {
        means: lift(mean)?,
        vars: lift(var)?,
        log_weights: t.constant(&[1, 1], vec![0.0])?,
    };
    mixture_nll(t, &params, x2)
}

/// Mean squared error.
pub fn l2_loss(t: &Tape, pred: Tensor, x: Tensor) -> Result<Tensor> {
    t.mse(pred, x)
}

/// Reparameterised sample: draws a component from the weights with no
/// gradient through the draw, then returns `mu_c + sqrt(var_c) * eps` so
/// gradients flow into the selected component's mean and variance.
/// `means`/`vars` are `[k, d]` tape tensors; weights are host values.
pub fn sample_train(
    t: &Tape,
    means: Tensor,
    vars: Tensor,
    weights: &[Real],
    rng: &mut Prng,
) -> Result<Tensor> {
    let ms = t.shape_of(means);
    if ms.len() != 2 || ms[0] != weights.len() {
        return Err(Error::shape("sample_train", format!("means {:?} vs {} weights", ms, weights.len())));
    }
    let d = ms[1];
    let c = rng.categorical(weights);
    let mu = t.reshape(t.slice(means, 0, c, 1)?, &[d])?;
    let var = t.reshape(t.slice(vars, 0, c, 1)?, &[d])?;
    let eps = t.constant(&[d], rng.normal_vec(d))?;
    t.add(mu, t.mul(t.sqrt(var)?, eps)?)
}

/// Inference-time sample: same mechanics as [`sample_train`], gradient-free
/// and host-side.
pub fn sample_infer(params: &MixtureParams, rng: &mut Prng) -> Vec<Real> {
    let c = rng.categorical(&params.weights);
    let d = params.d;
    (0..d)
        .map(|j| {
            let m = params.means[c * d + j];
            let v = params.vars[c * d + j];
            m + v.sqrt() * rng.normal()
        })
        .collect()
}

/// Head loss used in training: NLL for distribution heads, MSE for L2.
pub fn head_loss(t: &Tape, raw: Tensor, targets: Tensor, cfg: &HeadConfig) -> Result<Tensor> {
    match cfg.kind {
        HeadKind::L2 => l2_loss(t, raw, targets),
        _ => {
            let params = raw_to_tensors(t, raw, cfg)?;
            mixture_nll(t, &params, targets)
        }
    }
}

/// L2 warm-up loss: mean squared error of every component mean against the
/// target. Used by the first half of the image stage before switching to the
/// configured likelihood.
pub fn head_l2_warmup_loss(t: &Tape, raw: Tensor, targets: Tensor, cfg: &HeadConfig) -> Result<Tensor> {
    let shape = t.shape_of(raw);
    let p = shape[0];
    let (k, d) = (cfg.components(), cfg.dim);
    let means = match cfg.kind {
        HeadKind::L2 => raw,
        _ => t.slice(raw, 1, 0, k * d)?,
    };
    let means = t.reshape(means, &[p, k, d])?;
    let xr = t.reshape(targets, &[p, 1, d])?;
    let diff = t.sub(means, xr)?;
    t.mean_all(t.mul(diff, diff)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::params::{normal_init, ParamSet};

    fn tape() -> Tape {
        Tape::new()
    }

    #[test]
    fn param_count_matches_head_kind() {
        assert_eq!(HeadConfig::new(HeadKind::L2, 0, 7).param_count(), 7);
        assert_eq!(HeadConfig::new(HeadKind::Gaussian, 0, 7).param_count(), 14);
        // 16 x 1024 x 2 + 16 = 32784.
        assert_eq!(HeadConfig::new(HeadKind::Gmm, 16, 1024).param_count(), 32784);
    }

    #[test]
    fn raw_to_params_k1_weights_are_one() {
        let cfg = HeadConfig::new(HeadKind::Gmm, 1, 3);
        let raw = vec![0.5; cfg.param_count()];
        let p = raw_to_params(&raw, &cfg).unwrap();
        assert_eq!(p.weights, vec![1.0]);
        p.validate().unwrap();
    }

    #[test]
    fn raw_to_params_equal_logits_give_uniform_weights() {
        let cfg = HeadConfig::new(HeadKind::Gmm, 4, 2);
        let raw = vec![0.7; cfg.param_count()];
        let p = raw_to_params(&raw, &cfg).unwrap();
        for w in &p.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_to_params_length_mismatch() {
        let cfg = HeadConfig::new(HeadKind::Gmm, 2, 2);
        assert!(raw_to_params(&[0.0; 3], &cfg).is_err());
    }

    #[test]
    fn gmm_nll_at_its_mean_is_the_gaussian_constant() {
        // K=1, unit variance, mu = x, d=3: nll = (3/2) ln(2 pi).
        let t = tape();
        let means = t.constant(&[1, 3], vec![0.2, -0.4, 1.0]).unwrap();
        let vars = t.constant(&[1, 3], vec![1.0; 3]).unwrap();
        let w = t.constant(&[1], vec![1.0]).unwrap();
        let x = t.constant(&[3], vec![0.2, -0.4, 1.0]).unwrap();
        let nll = gmm_nll(&t, means, vars, w, x).unwrap();
        let expect = 1.5 * LN_2PI;
        assert!((t.scalar(nll).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 2.7568155996140183).abs() < 1e-12);
    }

    #[test]
    fn far_mode_evaluation_stays_finite() {
        let t = tape();
        let means = t.constant(&[2, 1], vec![0.0, 10.0]).unwrap();
        let vars = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let w = t.constant(&[2], vec![0.5, 0.5]).unwrap();
        let x = t.constant(&[1], vec![1000.0]).unwrap();
        let nll = gmm_nll(&t, means, vars, w, x).unwrap();
        let v = t.scalar(nll).unwrap();
        assert!(v.is_finite());
        // The far component underflows entirely, so the value equals the
        // near-component NLL plus ln 2 from its 0.5 weight.
        let near = 0.5 * (1000.0 - 10.0) * (1000.0 - 10.0) + 0.5 * LN_2PI;
        assert!((v - (near + (2.0 as Real).ln())).abs() < 1e-6, "v = {v}");
    }

    #[test]
    fn degeneration_k1_equals_gaussian_bit_exactly() {
        let t = tape();
        let mean = vec![0.3, -0.7, 0.1];
        let var = vec![0.5, 1.5, 2.0];
        let x = vec![0.9, 0.2, -0.3];

        let m1 = t.constant(&[1, 3], mean.clone()).unwrap();
        let v1 = t.constant(&[1, 3], var.clone()).unwrap();
        let w1 = t.constant(&[1], vec![1.0]).unwrap();
        let x1 = t.constant(&[3], x.clone()).unwrap();
        let a = t.scalar(gmm_nll(&t, m1, v1, w1, x1).unwrap()).unwrap();

        let m2 = t.constant(&[3], mean).unwrap();
        let v2 = t.constant(&[3], var).unwrap();
        let x2 = t.constant(&[3], x).unwrap();
        let b = t.scalar(gaussian_nll(&t, m2, v2, x2).unwrap()).unwrap();

        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gaussian_unit_variance_is_half_l2_plus_constant() {
        let t = tape();
        let d = 5usize;
        let mean = vec![0.3, -0.7, 0.1, 0.0, 2.0];
        let x = vec![0.9, 0.2, -0.3, 1.0, -1.5];
        let m = t.constant(&[d], mean.clone()).unwrap();
        let v = t.constant(&[d], vec![1.0; d]).unwrap();
        let xt = t.constant(&[d], x.clone()).unwrap();
        let nll = t.scalar(gaussian_nll(&t, m, v, xt).unwrap()).unwrap();

        let sumsq: Real = mean.iter().zip(x.iter()).map(|(m, x)| (x - m) * (x - m)).sum();
        assert!((nll - (0.5 * sumsq + d as Real / 2.0 * LN_2PI)).abs() < 1e-12);

        // Same identity through the l2_loss op (mean squared error).
        let m2 = t.constant(&[d], mean).unwrap();
        let x2 = t.constant(&[d], x).unwrap();
        let l2 = t.scalar(l2_loss(&t, m2, x2).unwrap()).unwrap();
        assert!((nll - (0.5 * d as Real * l2 + d as Real / 2.0 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn l2_loss_examples() {
        let t = tape();
        let x = t.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let same = t.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.scalar(l2_loss(&t, same, x).unwrap()).unwrap(), 0.0);
        let off = t.constant(&[4], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.scalar(l2_loss(&t, off, x).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn gradients_match_finite_differences_through_raw_params() {
        let mut rng = Prng::seeded(21);
        let cfg = HeadConfig::new(HeadKind::Gmm, 2, 3);
        let mut ps = ParamSet::new();
        let raw = ps.add("raw", &[2, cfg.param_count()], normal_init(&mut rng, 2 * cfg.param_count(), 0.7)).unwrap();
        let targets = normal_init(&mut rng, 6, 1.0);
        let report = check_gradients(&mut ps, &[raw], &GradCheckOptions::default(), |t, ps| {
            let r = t.param(ps, raw)?;
            let x = t.constant(&[2, 3], targets.clone())?;
            head_loss(t, r, x, &cfg)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn sample_train_respects_degenerate_weights_and_floor() {
        let t = tape();
        let mut rng = Prng::seeded(3);
        let means = t.leaf(&[2, 2], vec![5.0, 5.0, -5.0, -5.0]).unwrap();
        let vars = t.constant(&[2, 2], vec![VAR_FLOOR; 4]).unwrap();
        for _ in 0..20 {
            let s = sample_train(&t, means, vars, &[1.0, 0.0], &mut rng).unwrap();
            let d = t.data(s);
            assert!((d[0] - 5.0).abs() < 10.0 * VAR_FLOOR.sqrt());
        }
    }

    #[test]
    fn sample_train_gradients_reach_selected_component() {
        let t = tape();
        let mut rng = Prng::seeded(9);
        let means = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let vars = t.leaf(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let s = sample_train(&t, means, vars, &[1.0, 0.0], &mut rng).unwrap();
        let loss = t.sum_all(s).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad_vec(means).unwrap();
        assert_eq!(&g[0..2], &[1.0, 1.0]);
        assert_eq!(&g[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn component_frequencies_match_weights() {
        let cfg = HeadConfig::new(HeadKind::Gmm, 4, 1);
        let params = MixtureParams {
            means: vec![0.0, 10.0, 20.0, 30.0],
            vars: vec![0.01; 4],
            weights: vec![0.1, 0.2, 0.3, 0.4],
            k: 4,
            d: 1,
        };
        params.validate().unwrap();
        let mut rng = Prng::seeded(17);
        let mut counts = [0usize; 4];
        let n = 20_000;
        for _ in 0..n {
            let s = sample_infer(&params, &mut rng);
            let c = (s[0] / 10.0).round().max(0.0).min(3.0) as usize;
            counts[c] += 1;
        }
        for c in 0..4 {
            let freq = counts[c] as Real / n as Real;
            assert!((freq - params.weights[c]).abs() < 0.01, "component {c}: {freq}");
        }
        let _ = cfg;
    }

    #[test]
    fn sample_infer_moments_match_mixture() {
        // Per-dimension mean within 3 standard errors, variance within 5%.
        let params = MixtureParams {
            means: vec![1.0, -2.0, 4.0, 0.5],
            vars: vec![0.3, 0.8, 0.5, 1.2],
            weights: vec![0.3, 0.7],
            k: 2,
            d: 2,
        };
        params.validate().unwrap();
        let n = 50_000;
        let mut rng = Prng::seeded(29);
        let mut sum = [0.0 as Real; 2];
        let mut sumsq = [0.0 as Real; 2];
        for _ in 0..n {
            let s = sample_infer(&params, &mut rng);
            for j in 0..2 {
                sum[j] += s[j];
                sumsq[j] += s[j] * s[j];
            }
        }
        for j in 0..2 {
            let mean_true: Real = (0..2).map(|c| params.weights[c] * params.means[c * 2 + j]).sum();
            let second: Real = (0..2)
                .map(|c| {
                    params.weights[c]
                        * (params.vars[c * 2 + j] + params.means[c * 2 + j] * params.means[c * 2 + j])
                })
                .sum();
            let var_true = second - mean_true * mean_true;
            let mean = sum[j] / n as Real;
            let var = sumsq[j] / n as Real - mean * mean;
            let se = (var_true / n as Real).sqrt();
            assert!((mean - mean_true).abs() < 3.0 * se, "dim {j}: {mean} vs {mean_true}");
            assert!((var - var_true).abs() < 0.05 * var_true, "dim {j}: {var} vs {var_true}");
        }
    }

    #[test]
    fn identical_seed_identical_sample() {
        let params = MixtureParams {
            means: vec![0.0, 1.0],
            vars: vec![1.0, 1.0],
            weights: vec![0.5, 0.5],
            k: 2,
            d: 1,
        };
        let a = sample_infer(&params, &mut Prng::for_purpose(4, "s", 0));
        let b = sample_infer(&params, &mut Prng::for_purpose(4, "s", 0));
        assert_eq!(a, b);
    }

    /// Fits a 2-component mixture to draws from a known bimodal target and
    /// checks mode recovery; an L2 fit lands near the (useless) global mean.
    #[test]
    fn mode_recovery_vs_l2_mean_collapse() {
        use crate::optim::{AdamW, AdamWConfig};

        let d = 2usize;
        let sigma = 0.3 as Real;
        let n = 512usize;
        let mut rng = Prng::seeded(41);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for _ in 0..d {
                data.push(sign * 3.0 + sigma * rng.normal());
            }
        }

        let cfg = HeadConfig::new(HeadKind::Gmm, 2, d);
        let mut ps = ParamSet::new();
        let mut init = normal_init(&mut rng, cfg.param_count(), 0.5);
        // Start variances near 1 so both components feel both modes.
        for v in init[2 * d..4 * d].iter_mut() {
            *v = 0.55;
        }
        let raw = ps.add("raw", &[1, cfg.param_count()], init).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        for _ in 0..800 {
            let t = Tape::new();
            let r = t.param(&ps, raw).unwrap();
            let gt = raw_to_tensors(&t, r, &cfg).unwrap();
            // Broadcast the single mixture over all draws.
            let x = t.constant(&[n, d], data.clone()).unwrap();
            let loss = mixture_nll(&t, &gt, x).unwrap();
            t.backward(loss).unwrap();
            opt.step(&mut ps, &t, 0.05).unwrap();
        }
        let fitted = raw_to_params(&ps.value(raw)[..], &cfg).unwrap();
        let mode_a = [3.0 as Real; 2];
        let mode_b = [-3.0 as Real; 2];
        let dist = |m: &[Real], target: &[Real; 2]| -> Real {
            ((m[0] - target[0]).powi(2) + (m[1] - target[1]).powi(2)).sqrt()
        };
        let c0 = &fitted.means[0..2];
        let c1 = &fitted.means[2..4];
        let best = (dist(c0, &mode_a) + dist(c1, &mode_b)).min(dist(c0, &mode_b) + dist(c1, &mode_a));
        assert!(best < 0.4, "mode recovery error {best}");
        assert!(dist(c0, &mode_a).min(dist(c0, &mode_b)) < 0.2);
        assert!(dist(c1, &mode_a).min(dist(c1, &mode_b)) < 0.2);

        // L2 fit on the same data: converges to the mean, far from the modes.
        let mut ps2 = ParamSet::new();
        let pred = ps2.add("pred", &[d], vec![0.1, -0.2]).unwrap();
        let mut opt2 = AdamW::new(&ps2, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        for _ in 0..400 {
            let t = Tape::new();
            let p = t.param(&ps2, pred).unwrap();
            let p2 = t.reshape(p, &[1, d]).unwrap();
            let x = t.constant(&[n, d], data.clone()).unwrap();
            let diff = t.sub(p2, x).unwrap();
            let loss = t.mean_all(t.mul(diff, diff).unwrap()).unwrap();
            t.backward(loss).unwrap();
            opt2.step(&mut ps2, &t, 0.05).unwrap();
        }
        let p = ps2.value(pred);
        assert!(dist(p, &mode_a) >= 2.5 && dist(p, &mode_b) >= 2.5, "L2 fit at {:?}", p);
    }
}
