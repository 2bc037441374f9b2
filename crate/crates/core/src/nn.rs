//! Transformer building blocks on top of the tensor core.
//!
//! All layers operate on rank-3 activations `[batch, seq, channels]` and hold
//! only [`ParamId`]s; values live in a [`ParamSet`] and are bound onto a tape
//! per forward pass.

use crate::error::{Error, Result};
use crate::params::{normal_init, ones, xavier_init, zeros, ParamId, ParamSet};
use crate::rng::Prng;
use crate::tensor::{Real, Tape, Tensor, MASK_NEG};

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = ps.add(&format!("{name}/w"), &[fan_in, fan_out], xavier_init(rng, fan_in, fan_out))?;
        let b = ps.add(&format!("{name}/b"), &[fan_out], zeros(fan_out))?;
        Ok(Linear { w, b: Some(b) })
    }

    pub fn new_no_bias(ps: &mut ParamSet, rng: &mut Prng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = ps.add(&format!("{name}/w"), &[fan_in, fan_out], xavier_init(rng, fan_in, fan_out))?;
        Ok(Linear { w, b: None })
    }

    pub fn forward(&self, t: &Tape, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let w = t.param(ps, self.w)?;
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => t.add(y, t.param(ps, b)?),
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: Real,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: ps.add(&format!("{name}/gain"), &[dim], ones(dim))?,
            bias: ps.add(&format!("{name}/bias"), &[dim], zeros(dim))?,
            eps: 1e-5 as Real,
        })
    }

    pub fn forward(&self, t: &Tape, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        t.layer_norm(x, t.param(ps, self.gain)?, t.param(ps, self.bias)?, self.eps)
    }
}

/// Scaled dot-product attention over pre-projected q/k/v of shape
/// `[batch, seq, channels]`. With `causal` set, position `i` attends only to
/// positions `<= i` via an additive mask applied before the softmax.
pub fn attention(t: &Tape, q: Tensor, k: Tensor, v: Tensor, n_heads: usize, causal: bool) -> Result<Tensor> {
    let qs = t.shape_of(q);
    let ks = t.shape_of(k);
    if qs.len() != 3 || ks.len() != 3 {
        return Err(Error::shape("attention", format!("expected rank 3, got {:?} / {:?}", qs, ks)));
    }
    let (b, s, c) = (qs[0], qs[1], qs[2]);
    let m = ks[1];
    if c % n_heads != 0 {
        return Err(Error::invalid("attention", format!("channels {c} not divisible by {n_heads} heads")));
    }
    if causal && s != m {
        return Err(Error::invalid("attention", "causal mask requires equal query/key lengths"));
    }
    let hd = c / n_heads;

    let split = |x: Tensor, len: usize| -> Result<Tensor> {
        let r = t.reshape(x, &[b, len, n_heads, hd])?;
        t.permute(r, &[0, 2, 1, 3])
    };
    let qh = split(q, s)?;
    let kh = split(k, m)?;
    let vh = split(v, m)?;

    let kt = t.permute(kh, &[0, 1, 3, 2])?;
    let mut scores = t.matmul(qh, kt)?;
    scores = t.scale(scores, 1.0 / (hd as Real).sqrt())?;
    if causal {
        let mut mask = vec![0.0 as Real; s * s];
        for i in 0..s {
            for j in (i + 1)..s {
                mask[i * s + j] = MASK_NEG;
            }
        }
        let mask = t.constant(&[s, s], mask)?;
        scores = t.add(scores, mask)?;
    }
    let probs = t.softmax(scores, 3)?;
    let ctx = t.matmul(probs, vh)?;
    let merged = t.permute(ctx, &[0, 2, 1, 3])?;
    t.reshape(merged, &[b, s, c])
}

pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Prng,
        name: &str,
        dim: usize,
        n_heads: usize,
        causal: bool,
    ) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::invalid("attention", "need at least one head"));
        }
        // When the head count does not divide the width, project to the
        // nearest smaller multiple for the attention inner dimension.
        let head_dim = (dim / n_heads).max(1);
        let inner = head_dim * n_heads;
        Ok(MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}/wq"), dim, inner)?,
            wk: Linear::new(ps, rng, &format!("{name}/wk"), dim, inner)?,
            wv: Linear::new(ps, rng, &format!("{name}/wv"), dim, inner)?,
            wo: Linear::new(ps, rng, &format!("{name}/wo"), inner, dim)?,
            n_heads,
            causal,
        })
    }

    /// Self-attention when `kv` is `None`, cross-attention otherwise.
    pub fn forward(&self, t: &Tape, ps: &ParamSet, x: Tensor, kv: Option<Tensor>) -> Result<Tensor> {
        let q = self.wq.forward(t, ps, x)?;
        let src = kv.unwrap_or(x);
        let k = self.wk.forward(t, ps, src)?;
        let v = self.wv.forward(t, ps, src)?;
        let ctx = attention(t, q, k, v, self.n_heads, self.causal)?;
        self.wo.forward(t, ps, ctx)
    }
}

pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(ps, rng, &format!("{name}/fc1"), dim, hidden)?,
            fc2: Linear::new(ps, rng, &format!("{name}/fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, t: &Tape, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(t, ps, x)?;
        let h = t.gelu(h)?;
        self.fc2.forward(t, ps, h)
    }
}

/// Pre-norm transformer block, optionally with a cross-attention stage
/// between self-attention and the feed-forward.
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Prng,
        name: &str,
        dim: usize,
        n_heads: usize,
        causal: bool,
        with_cross: bool,
    ) -> Result<Self> {
        let cross = if with_cross {
            Some((
                LayerNorm::new(ps, &format!("{name}/ln_cross"), dim)?,
                MultiHeadAttention::new(ps, rng, &format!("{name}/cross"), dim, n_heads, false)?,
            ))
        } else {
            None
        };
        Ok(Block {
            ln1: LayerNorm::new(ps, &format!("{name}/ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}/attn"), dim, n_heads, causal)?,
            cross,
            ln2: LayerNorm::new(ps, &format!("{name}/ln2"), dim)?,
            ff: FeedForward::new(ps, rng, &format!("{name}/ff"), dim, dim * 4)?,
        })
    }

    pub fn forward(&self, t: &Tape, ps: &ParamSet, x: Tensor, cond: Option<Tensor>) -> Result<Tensor> {
        let normed = self.ln1.forward(t, ps, x)?;
        let mut y = t.add(x, self.attn.forward(t, ps, normed, None)?)?;
        if let Some((ln_c, cross)) = &self.cross {
            let cond = cond.ok_or_else(|| Error::invalid("block", "cross block needs a condition"))?;
            let normed = ln_c.forward(t, ps, y)?;
            y = t.add(y, cross.forward(t, ps, normed, Some(cond))?)?;
        }
        let normed = self.ln2.forward(t, ps, y)?;
        t.add(y, self.ff.forward(t, ps, normed)?)
    }
}

/// Three stacked linear layers with gelu between them.
pub struct Mlp3 {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Mlp3 {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Result<Self> {
        Ok(Mlp3 {
            l1: Linear::new(ps, rng, &format!("{name}/l1"), fan_in, hidden)?,
            l2: Linear::new(ps, rng, &format!("{name}/l2"), hidden, hidden)?,
            l3: Linear::new(ps, rng, &format!("{name}/l3"), hidden, fan_out)?,
        })
    }

    pub fn forward(&self, t: &Tape, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let h = t.gelu(self.l1.forward(t, ps, x)?)?;
        let h = t.gelu(self.l2.forward(t, ps, h)?)?;
        self.l3.forward(t, ps, h)
    }

    /// Zeroes the final projection so the module starts as the zero map.
    pub fn zero_final(&self, ps: &mut ParamSet) {
        for v in ps.value_mut(self.l3.w).iter_mut() {
            *v = 0.0;
        }
        if let Some(b) = self.l3.b {
            for v in ps.value_mut(b).iter_mut() {
                *v = 0.0;
            }
        }
    }
}

pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(ps: &mut ParamSet, rng: &mut Prng, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Embedding { table: ps.add(name, &[vocab, dim], normal_init(rng, vocab * dim, 0.02))? })
    }

    pub fn forward(&self, t: &Tape, ps: &ParamSet, ids: &[usize]) -> Result<Tensor> {
        t.gather_rows(t.param(ps, self.table)?, ids)
    }
}

/// Sinusoidal embedding of an integer timestep, host-side.
pub fn timestep_embedding(step: usize, dim: usize, max_period: Real) -> Vec<Real> {
    let half = dim / 2;
    let mut out = vec![0.0 as Real; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as Real / half as Real).exp();
        let angle = step as Real * freq;
        out[i] = angle.cos();
        out[half + i] = angle.sin();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};

    #[test]
    fn causal_attention_position_zero_sees_only_itself() {
        // Single head, seq 3: change inputs at positions 1, 2 and verify the
        // output at position 0 is bit-identical.
        let run = |late: Real| -> Vec<Real> {
            let t = Tape::new();
            let q = t
                .constant(&[1, 3, 2], vec![0.1, 0.2, late, 0.4, 0.5, late])
                .unwrap();
            let k = t
                .constant(&[1, 3, 2], vec![0.3, -0.1, late, 0.9, -0.2, late])
                .unwrap();
            let v = t
                .constant(&[1, 3, 2], vec![1.0, 2.0, late, 4.0, 5.0, late])
                .unwrap();
            let out = attention(&t, q, k, v, 1, true).unwrap();
            t.data(out)[0..2].to_vec()
        };
        assert_eq!(run(7.0), run(-3.0));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        // 2 heads, seq 4, dim 6.
        let mut rng = Prng::seeded(3);
        let mut ps = ParamSet::new();
        let q = ps.add("q", &[1, 4, 6], normal_init(&mut rng, 24, 0.5)).unwrap();
        let k = ps.add("k", &[1, 4, 6], normal_init(&mut rng, 24, 0.5)).unwrap();
        let v = ps.add("v", &[1, 4, 6], normal_init(&mut rng, 24, 0.5)).unwrap();
        let weights = normal_init(&mut rng, 24, 0.5);
        for causal in [false, true] {
            let w = weights.clone();
            let report = check_gradients(&mut ps, &[q, k, v], &GradCheckOptions::default(), |t, ps| {
                let qv = t.param(ps, q)?;
                let kv = t.param(ps, k)?;
                let vv = t.param(ps, v)?;
                let out = attention(t, qv, kv, vv, 2, causal)?;
                // Weighted sum so every output entry matters.
                let wt = t.constant(&[1, 4, 6], w.clone())?;
                t.sum_all(t.mul(out, wt)?)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "causal={causal} rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = Prng::seeded(5);
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 5], normal_init(&mut rng, 10, 1.0)).unwrap();
        let gain = ps.add("gain", &[5], normal_init(&mut rng, 5, 0.3)).unwrap();
        let bias = ps.add("bias", &[5], normal_init(&mut rng, 5, 0.3)).unwrap();
        let w = normal_init(&mut rng, 10, 1.0);
        let report = check_gradients(&mut ps, &[x, gain, bias], &GradCheckOptions::default(), |t, ps| {
            let out = t.layer_norm(t.param(ps, x)?, t.param(ps, gain)?, t.param(ps, bias)?, 1e-5)?;
            let wt = t.constant(&[2, 5], w.clone())?;
            t.sum_all(t.mul(out, wt)?)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_b_transpose() {
        let mut rng = Prng::seeded(7);
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[5, 4], normal_init(&mut rng, 20, 1.0)).unwrap();
        let b_vals = normal_init(&mut rng, 12, 1.0);
        let b = ps.add("b", &[4, 3], b_vals.clone()).unwrap();

        let report = check_gradients(&mut ps, &[a, b], &GradCheckOptions::default(), |t, ps| {
            t.sum_all(t.matmul(t.param(ps, a)?, t.param(ps, b)?)?)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);

        // grad wrt a of sum(a.b) is ones(5,3) . b^T.
        let t = Tape::new();
        let av = t.param(&ps, a).unwrap();
        let bv = t.param(&ps, b).unwrap();
        let loss = t.sum_all(t.matmul(av, bv).unwrap()).unwrap();
        t.backward(loss).unwrap();
        let ga = t.param_grad(a).unwrap();
        for i in 0..5 {
            for p in 0..4 {
                let expect: Real = (0..3).map(|j| b_vals[p * 3 + j]).sum();
                assert!((ga[i * 4 + p] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = Prng::seeded(9);
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[7], normal_init(&mut rng, 7, 1.0)).unwrap();
        let w = normal_init(&mut rng, 7, 1.0);
        let report = check_gradients(&mut ps, &[x], &GradCheckOptions::default(), |t, ps| {
            let y = t.softmax(t.param(ps, x)?, 0)?;
            let wt = t.constant(&[7], w.clone())?;
            t.sum_all(t.mul(y, wt)?)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn gelu_and_softplus_gradients() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[5], vec![-2.0, -0.5, 0.0, 0.7, 2.5]).unwrap();
        for which in 0..2 {
            let report = check_gradients(&mut ps, &[x], &GradCheckOptions::default(), |t, ps| {
                let xv = t.param(ps, x)?;
                let y = if which == 0 { t.gelu(xv)? } else { t.softplus(xv)? };
                t.sum_all(y)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn block_forward_and_gradients_flow() {
        let mut rng = Prng::seeded(11);
        let mut ps = ParamSet::new();
        let block = Block::new(&mut ps, &mut rng, "blk", 8, 2, true, false).unwrap();
        let x = ps.add("x", &[1, 3, 8], normal_init(&mut rng, 24, 1.0)).unwrap();

        let t = Tape::new();
        let xv = t.param(&ps, x).unwrap();
        let y = block.forward(&t, &ps, xv, None).unwrap();
        let loss = t.mean_all(t.mul(y, y).unwrap()).unwrap();
        t.backward(loss).unwrap();
        let g = t.param_grad(block.attn.wq.w).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
