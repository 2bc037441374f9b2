//! Forward implementations of the differentiable operation set.

use crate::error::{Error, Result};

use super::shape::{axis_split, broadcast_shapes, broadcast_strides, numel, strides, MultiIter};
use super::{Op, Real, Tape, Tensor};

pub(crate) const GELU_COEF: Real = 0.7978845608028654 as Real; // sqrt(2/pi)
pub(crate) const GELU_CUBIC: Real = 0.044715 as Real;

pub(crate) fn gelu_fwd(x: Real) -> Real {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_bwd(x: Real) -> Real {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub(crate) fn softplus_fwd(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tape {
    fn binary(&self, name: &'static str, kind: BinKind, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out_shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let out_shape = broadcast_shapes(&na.shape, &nb.shape).ok_or_else(|| {
                Error::shape(name, format!("{:?} vs {:?}", na.shape, nb.shape))
            })?;
            let n = numel(&out_shape);
            let mut data = vec![0.0 as Real; n];
            let f = |x: Real, y: Real| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            if na.shape == nb.shape {
                for (o, (x, y)) in data.iter_mut().zip(na.data.iter().zip(nb.data.iter())) {
                    *o = f(*x, *y);
                }
            } else if out_shape == na.shape && is_suffix(&nb.shape, &na.shape) && !nb.data.is_empty() {
                // Common case: b is tiled along a's leading dims (bias add,
                // positional add, mask add).
                let m = nb.data.len();
                for (chunk, out_chunk) in na.data.chunks(m).zip(data.chunks_mut(m)) {
                    for ((o, x), y) in out_chunk.iter_mut().zip(chunk.iter()).zip(nb.data.iter()) {
                        *o = f(*x, *y);
                    }
                }
            } else {
                let sa = broadcast_strides(&na.shape, &out_shape);
                let sb = broadcast_strides(&nb.shape, &out_shape);
                let mut i = 0usize;
                MultiIter::new(&out_shape, vec![sa, sb]).for_each(|offs| {
                    data[i] = f(na.data[offs[0]], nb.data[offs[1]]);
                    i += 1;
                });
            }
            (out_shape, data)
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let op = match kind {
            BinKind::Add => Op::Add(a, b),
            BinKind::Sub => Op::Sub(a, b),
            BinKind::Mul => Op::Mul(a, b),
            BinKind::Div => Op::Div(a, b),
        };
        self.push(name, out_shape, data, rg, op)
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", BinKind::Mul, a, b)
    }

    pub fn div(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("div", BinKind::Div, a, b)
    }

    fn unary(
        &self,
        name: &'static str,
        x: Tensor,
        f: impl Fn(Real) -> Real,
        op: Op,
    ) -> Result<Tensor> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.data.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        self.push(name, shape, data, rg, op)
    }

    pub fn neg(&self, x: Tensor) -> Result<Tensor> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&self, x: Tensor) -> Result<Tensor> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&self, x: Tensor) -> Result<Tensor> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&self, x: Tensor) -> Result<Tensor> {
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn gelu(&self, x: Tensor) -> Result<Tensor> {
        self.unary("gelu", x, gelu_fwd, Op::Gelu(x))
    }

    pub fn softplus(&self, x: Tensor) -> Result<Tensor> {
        self.unary("softplus", x, softplus_fwd, Op::Softplus(x))
    }

    pub fn scale(&self, x: Tensor, c: Real) -> Result<Tensor> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Tensor, c: Real) -> Result<Tensor> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&self, x: Tensor) -> Result<Tensor> {
        self.mul(x, x)
    }

    /// Batched matrix product. Trailing two dims multiply; leading dims
    /// broadcast NumPy-style.
    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out_shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            matmul_forward(&na.data, &na.shape, &nb.data, &nb.shape)?
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("matmul", out_shape, data, rg, Op::Matmul(a, b))
    }

    pub fn softmax(&self, x: Tensor, axis: usize) -> Result<Tensor> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("softmax", &n.shape, axis)?;
            let (outer, len, inner) = axis_split(&n.shape, axis);
            let mut data = vec![0.0 as Real; n.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut m = Real::NEG_INFINITY;
                    for l in 0..len {
                        m = m.max(n.data[base + l * inner]);
                    }
                    let mut s = 0.0 as Real;
                    for l in 0..len {
                        let e = (n.data[base + l * inner] - m).exp();
                        data[base + l * inner] = e;
                        s += e;
                    }
                    for l in 0..len {
                        data[base + l * inner] /= s;
                    }
                }
            }
            (n.shape.clone(), data, n.requires_grad)
        };
        self.push("softmax", shape, data, rg, Op::Softmax { x, axis })
    }

    /// `log(sum(exp(x)))` along `axis`, computed with a max shift. The axis
    /// is dropped from the output shape.
    pub fn logsumexp(&self, x: Tensor, axis: usize) -> Result<Tensor> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("logsumexp", &n.shape, axis)?;
            let (outer, len, inner) = axis_split(&n.shape, axis);
            let mut data = vec![0.0 as Real; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut m = Real::NEG_INFINITY;
                    for l in 0..len {
                        m = m.max(n.data[base + l * inner]);
                    }
                    let mut s = 0.0 as Real;
                    for l in 0..len {
                        s += (n.data[base + l * inner] - m).exp();
                    }
                    data[o * inner + i] = m + s.ln();
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            (shape, data, n.requires_grad)
        };
        self.push("logsumexp", shape, data, rg, Op::LogSumExp { x, axis })
    }

    /// Layer normalisation over the last axis, then affine gain/bias of the
    /// same extent.
    pub fn layer_norm(&self, x: Tensor, gain: Tensor, bias: Tensor, eps: Real) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", format!("eps must be > 0, got {eps}")));
        }
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
            let c = *nx.shape.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
            if ng.shape != [c] || nb.shape != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("gain {:?} / bias {:?} vs feature dim {c}", ng.shape, nb.shape),
                ));
            }
            let rows = nx.data.len() / c;
            let mut data = vec![0.0 as Real; nx.data.len()];
            for r in 0..rows {
                let row = &nx.data[r * c..(r + 1) * c];
                let mean = row.iter().sum::<Real>() / c as Real;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    data[r * c + j] = (row[j] - mean) * inv * ng.data[j] + nb.data[j];
                }
            }
            (
                nx.shape.clone(),
                data,
                nx.requires_grad || ng.requires_grad || nb.requires_grad,
            )
        };
        self.push("layer_norm", shape, data, rg, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Sum along one axis; the axis is dropped from the output shape.
    pub fn sum_axis(&self, x: Tensor, axis: usize) -> Result<Tensor> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("sum_axis", &n.shape, axis)?;
            let (outer, len, inner) = axis_split(&n.shape, axis);
            let mut data = vec![0.0 as Real; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = o * len * inner + l * inner;
                    let dst = o * inner;
                    for i in 0..inner {
                        data[dst + i] += n.data[src + i];
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            (shape, data, n.requires_grad)
        };
        self.push("sum_axis", shape, data, rg, Op::SumAxis { x, axis })
    }

    pub fn sum_all(&self, x: Tensor) -> Result<Tensor> {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.data.iter().sum::<Real>(), n.requires_grad)
        };
        self.push("sum_all", vec![], vec![s], rg, Op::SumAll(x))
    }

    pub fn mean_all(&self, x: Tensor) -> Result<Tensor> {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.data.iter().sum::<Real>() / n.data.len() as Real, n.requires_grad)
        };
        self.push("mean_all", vec![], vec![s], rg, Op::MeanAll(x))
    }

    /// Row gather from a rank-2 table; used for embedding lookup and for
    /// selecting sequence positions.
    pub fn gather_rows(&self, x: Tensor, indices: &[usize]) -> Result<Tensor> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if n.shape.len() != 2 {
                return Err(Error::shape("gather_rows", format!("expected rank 2, got {:?}", n.shape)));
            }
            let (rows, c) = (n.shape[0], n.shape[1]);
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= rows {
                    return Err(Error::invalid("gather_rows", format!("index {i} out of {rows} rows")));
                }
                data.extend_from_slice(&n.data[i * c..(i + 1) * c]);
            }
            (vec![indices.len(), c], data, n.requires_grad)
        };
        self.push("gather_rows", shape, data, rg, Op::GatherRows { x, indices: indices.to_vec() })
    }

    pub fn concat(&self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no parts"));
        }
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0];
            check_axis("concat", &first.shape, axis)?;
            let mut total = 0usize;
            for p in parts {
                let s = &nodes[p.0].shape;
                if s.len() != first.shape.len() {
                    return Err(Error::shape("concat", format!("rank mismatch {:?} vs {:?}", s, first.shape)));
                }
                for (d, (&a, &b)) in s.iter().zip(first.shape.iter()).enumerate() {
                    if d != axis && a != b {
                        return Err(Error::shape("concat", format!("{:?} vs {:?} at dim {d}", s, first.shape)));
                    }
                }
                total += s[axis];
            }
            let mut shape = first.shape.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = vec![0.0 as Real; numel(&shape)];
            for o in 0..outer {
                let mut written = 0usize;
                for p in parts {
                    let n = &nodes[p.0];
                    let len = n.shape[axis];
                    let src = o * len * inner;
                    let dst = o * total * inner + written * inner;
                    data[dst..dst + len * inner].copy_from_slice(&n.data[src..src + len * inner]);
                    written += len;
                }
            }
            let rg = parts.iter().any(|p| nodes[p.0].requires_grad);
            (shape, data, rg)
        };
        self.push("concat", shape, data, rg, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice(&self, x: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("slice", &n.shape, axis)?;
            if start + len > n.shape[axis] {
                return Err(Error::invalid(
                    "slice",
                    format!("range {start}..{} exceeds extent {}", start + len, n.shape[axis]),
                ));
            }
            let (outer, full, inner) = axis_split(&n.shape, axis);
            let mut shape = n.shape.clone();
            shape[axis] = len;
            let mut data = vec![0.0 as Real; outer * len * inner];
            for o in 0..outer {
                let src = o * full * inner + start * inner;
                let dst = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&n.data[src..src + len * inner]);
            }
            (shape, data, n.requires_grad)
        };
        self.push("slice", shape, data, rg, Op::Slice { x, axis, start })
    }

    pub fn reshape(&self, x: Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let (data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if numel(new_shape) != n.data.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} ({} elems) to {:?}", n.shape, n.data.len(), new_shape),
                ));
            }
            (n.data.clone(), n.requires_grad)
        };
        self.push("reshape", new_shape.to_vec(), data, rg, Op::Reshape(x))
    }

    pub fn permute(&self, x: Tensor, perm: &[usize]) -> Result<Tensor> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if perm.len() != n.shape.len() {
                return Err(Error::shape("permute", format!("perm {:?} vs shape {:?}", perm, n.shape)));
            }
            let mut seen = vec![false; perm.len()];
            for &p in perm {
                if p >= perm.len() || seen[p] {
                    return Err(Error::invalid("permute", format!("bad permutation {:?}", perm)));
                }
                seen[p] = true;
            }
            let in_strides = strides(&n.shape);
            let out_shape: Vec<usize> = perm.iter().map(|&p| n.shape[p]).collect();
            let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut data = vec![0.0 as Real; n.data.len()];
            let mut i = 0usize;
            MultiIter::new(&out_shape, vec![walk]).for_each(|offs| {
                data[i] = n.data[offs[0]];
                i += 1;
            });
            (out_shape, data, n.requires_grad)
        };
        self.push("permute", shape, data, rg, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&self, pred: Tensor, target: Tensor) -> Result<Tensor> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }
}

/// True when `b` equals the trailing dims of `a` (so `b` broadcasts by
/// plain tiling).
pub(crate) fn is_suffix(b: &[usize], a: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for shape {:?}", shape)));
    }
    Ok(())
}

pub(crate) fn matmul_forward(
    a: &[Real],
    a_shape: &[usize],
    b: &[Real],
    b_shape: &[usize],
) -> Result<(Vec<usize>, Vec<Real>)> {
    let (batch, m, k, n, a_off, b_off) = matmul_layout(a_shape, b_shape)?;
    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0 as Real; numel(&out_shape)];
    let mut block = 0usize;
    MultiIter::new(&batch, vec![a_off, b_off]).for_each(|offs| {
        let ab = &a[offs[0] * m * k..offs[0] * m * k + m * k];
        let bb = &b[offs[1] * k * n..offs[1] * k * n + k * n];
        let ob = &mut out[block * m * n..(block + 1) * m * n];
        matmul_block(ab, bb, ob, m, k, n);
        block += 1;
    });
    Ok((out_shape, out))
}

/// Validates shapes and returns (batch shape, m, k, n and per-input batch
/// strides measured in blocks).
pub(crate) fn matmul_layout(
    a_shape: &[usize],
    b_shape: &[usize],
) -> Result<(Vec<usize>, usize, usize, usize, Vec<usize>, Vec<usize>)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(Error::shape("matmul", format!("need rank >= 2, got {:?} x {:?}", a_shape, b_shape)));
    }
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extents {k} vs {k2} ({:?} x {:?})", a_shape, b_shape)));
    }
    let ba = &a_shape[..a_shape.len() - 2];
    let bb = &b_shape[..b_shape.len() - 2];
    let batch = broadcast_shapes(ba, bb)
        .ok_or_else(|| Error::shape("matmul", format!("leading dims {:?} vs {:?}", ba, bb)))?;
    let a_off = broadcast_strides(ba, &batch);
    let b_off = broadcast_strides(bb, &batch);
    Ok((batch, m, k, n, a_off, b_off))
}

pub(crate) fn matmul_block(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let t = tape();
        let a = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape_of(c), vec![2, 1]);
        assert_eq!(t.data(c), vec![3.0, 4.0]);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let t = tape();
        let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), vec![11.0]);
    }

    #[test]
    fn matmul_broadcast_batch() {
        let t = tape();
        // [2,2,3] x [3,2] -> [2,2,2]
        let a = t.constant(&[2, 2, 3], (0..12).map(|v| v as Real).collect()).unwrap();
        let b = t.constant(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape_of(c), vec![2, 2, 2]);
        // row [0,1,2] -> [0+2, 1+2] = [2,3]
        assert_eq!(t.data(c)[0..2], [2.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let t = tape();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let t = tape();
        let x = t.constant(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        for v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let hot = t.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let y = t.softmax(hot, 0).unwrap();
        let d = t.data(y);
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1] >= 0.0 && d[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = tape();
        let x = t
            .constant(&[2, 4], vec![0.3, -1.0, 2.0, 0.7, 9.0, 8.0, -3.0, 0.1])
            .unwrap();
        let y = t.softmax(x, 1).unwrap();
        let d = t.data(y);
        for r in 0..2 {
            let s: Real = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_examples() {
        let t = tape();
        let x = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = t.logsumexp(x, 0).unwrap();
        assert!((t.data(y)[0] - (2.0 as Real).ln()).abs() < 1e-15);

        let x = t.constant(&[2], vec![-1.0e9, 0.0]).unwrap();
        let y = t.logsumexp(x, 0).unwrap();
        assert!((t.data(y)[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_matches_naive_at_small_magnitudes() {
        let t = tape();
        let vals = vec![0.3, -0.2, 0.9, 0.01, -1.4];
        let x = t.constant(&[5], vals.clone()).unwrap();
        let y = t.logsumexp(x, 0).unwrap();
        let naive = vals.iter().map(|v| v.exp()).sum::<Real>().ln();
        assert!((t.data(y)[0] - naive).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let t = tape();
        let x = t.constant(&[1, 4], vec![5.0; 4]).unwrap();
        let gain = t.constant(&[4], vec![1.0; 4]).unwrap();
        let bias = t.constant(&[4], vec![0.0; 4]).unwrap();
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in t.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let t = tape();
        let x = t.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let g = t.constant(&[4], vec![1.0; 4]).unwrap();
        let b = t.constant(&[4], vec![0.0; 4]).unwrap();
        assert!(t.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let t = tape();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![9.0, 8.0]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.data(c), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = t.slice(c, 1, 2, 1).unwrap();
        assert_eq!(t.data(s), vec![9.0, 8.0]);
    }

    #[test]
    fn permute_transposes() {
        let t = tape();
        let a = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = t.permute(a, &[1, 0]).unwrap();
        assert_eq!(t.shape_of(p), vec![3, 2]);
        assert_eq!(t.data(p), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gather_rows_picks_rows() {
        let t = tape();
        let a = t.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(a, &[2, 0, 2]).unwrap();
        assert_eq!(t.data(g), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn broadcast_add_bias() {
        let t = tape();
        let x = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.add(x, b).unwrap();
        assert_eq!(t.data(y), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }
}
