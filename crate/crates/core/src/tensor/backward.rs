//! Reverse-mode vector-Jacobian products for every recorded operation.
//!
//! Each node's upstream gradient is combined with the saved forward values
//! into per-input contributions, which then accumulate into the inputs'
//! gradient buffers. Contributions are computed before any accumulation so a
//! node may appear several times among its own inputs (e.g. `mul(x, x)`).

use crate::error::Result;

use super::ops::{gelu_bwd, matmul_layout, sigmoid};
use super::shape::{axis_split, broadcast_strides, numel, strides, MultiIter};
use super::{Node, Op, Real, Tensor};

pub(crate) fn dispatch(nodes: &mut [Node], id: usize) -> Result<()> {
    // Intermediate gradients are consumed here (all their consumers sit at
    // higher ids and have already run); leaf gradients stay readable.
    let g = if matches!(nodes[id].op, Op::Leaf) {
        nodes[id].grad.clone().expect("dispatch called without grad")
    } else {
        nodes[id].grad.take().expect("dispatch called without grad")
    };
    let op = nodes[id].op.clone();
    let out_shape = nodes[id].shape.clone();

    let mut contribs: Vec<(Tensor, Vec<Real>)> = Vec::new();

    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            binary_contrib(nodes, &g, &out_shape, a, b, &mut contribs, |_, _, g| (g, g));
        }
        Op::Sub(a, b) => {
            binary_contrib(nodes, &g, &out_shape, a, b, &mut contribs, |_, _, g| (g, -g));
        }
        Op::Mul(a, b) => {
            binary_contrib(nodes, &g, &out_shape, a, b, &mut contribs, |av, bv, g| (g * bv, g * av));
        }
        Op::Div(a, b) => {
            binary_contrib(nodes, &g, &out_shape, a, b, &mut contribs, |av, bv, g| {
                (g / bv, -g * av / (bv * bv))
            });
        }
        Op::Matmul(a, b) => {
            let (da, db) = matmul_backward(nodes, &g, a, b)?;
            contribs.push((a, da));
            contribs.push((b, db));
        }
        Op::Neg(x) => {
            contribs.push((x, g.iter().map(|&v| -v).collect()));
        }
        Op::Exp(x) => {
            let y = &nodes[id].data;
            contribs.push((x, g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect()));
        }
        Op::Log(x) => {
            let xd = &nodes[x.0].data;
            contribs.push((x, g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv / xv).collect()));
        }
        Op::Sqrt(x) => {
            let y = &nodes[id].data;
            contribs.push((x, g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * 0.5 / yv).collect()));
        }
        Op::Gelu(x) => {
            let xd = &nodes[x.0].data;
            contribs.push((x, g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv * gelu_bwd(xv)).collect()));
        }
        Op::Softplus(x) => {
            let xd = &nodes[x.0].data;
            contribs.push((x, g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv * sigmoid(xv)).collect()));
        }
        Op::Scale(x, c) => {
            contribs.push((x, g.iter().map(|&v| v * c).collect()));
        }
        Op::AddScalar(x) => {
            contribs.push((x, g.clone()));
        }
        Op::Softmax { x, axis } => {
            let y = &nodes[id].data;
            let (outer, len, inner) = axis_split(&out_shape, axis);
            let mut gx = vec![0.0 as Real; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0 as Real;
                    for l in 0..len {
                        let k = base + l * inner;
                        dot += g[k] * y[k];
                    }
                    for l in 0..len {
                        let k = base + l * inner;
                        gx[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            contribs.push((x, gx));
        }
        Op::LogSumExp { x, axis } => {
            let xd = &nodes[x.0].data;
            let y = &nodes[id].data;
            let xs = nodes[x.0].shape.clone();
            let (outer, len, inner) = axis_split(&xs, axis);
            let mut gx = vec![0.0 as Real; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let lane = o * inner + i;
                    let base = o * len * inner + i;
                    for l in 0..len {
                        let k = base + l * inner;
                        gx[k] = g[lane] * (xd[k] - y[lane]).exp();
                    }
                }
            }
            contribs.push((x, gx));
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (gx, ggain, gbias) = layer_norm_backward(nodes, &g, x, gain, eps);
            contribs.push((x, gx));
            contribs.push((gain, ggain));
            contribs.push((bias, gbias));
        }
        Op::SumAxis { x, axis } => {
            let xs = nodes[x.0].shape.clone();
            let (outer, len, inner) = axis_split(&xs, axis);
            let mut gx = vec![0.0 as Real; numel(&xs)];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx[o * len * inner + l * inner + i] = g[o * inner + i];
                    }
                }
            }
            contribs.push((x, gx));
        }
        Op::SumAll(x) => {
            contribs.push((x, vec![g[0]; nodes[x.0].data.len()]));
        }
        Op::MeanAll(x) => {
            let n = nodes[x.0].data.len();
            contribs.push((x, vec![g[0] / n as Real; n]));
        }
        Op::GatherRows { x, ref indices } => {
            let c = nodes[x.0].shape[1];
            let mut gx = vec![0.0 as Real; nodes[x.0].data.len()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..c {
                    gx[i * c + j] += g[r * c + j];
                }
            }
            contribs.push((x, gx));
        }
        Op::Concat { ref parts, axis } => {
            let total = out_shape[axis];
            let (outer, _, inner) = axis_split(&out_shape, axis);
            let mut written = 0usize;
            for p in parts {
                let len = nodes[p.0].shape[axis];
                let mut gp = vec![0.0 as Real; nodes[p.0].data.len()];
                for o in 0..outer {
                    let src = o * total * inner + written * inner;
                    let dst = o * len * inner;
                    gp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                written += len;
                contribs.push((*p, gp));
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[x.0].shape.clone();
            let (outer, full, inner) = axis_split(&xs, axis);
            let len = out_shape[axis];
            let mut gx = vec![0.0 as Real; numel(&xs)];
            for o in 0..outer {
                let dst = o * full * inner + start * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            contribs.push((x, gx));
        }
        Op::Reshape(x) => {
            contribs.push((x, g.clone()));
        }
        Op::Permute { x, ref perm } => {
            let in_strides = strides(&nodes[x.0].shape);
            let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut gx = vec![0.0 as Real; nodes[x.0].data.len()];
            let mut i = 0usize;
            MultiIter::new(&out_shape, vec![walk]).for_each(|offs| {
                gx[offs[0]] += g[i];
                i += 1;
            });
            contribs.push((x, gx));
        }
    }

    for (t, c) in contribs {
        accumulate(nodes, t, c);
    }
    Ok(())
}

fn accumulate(nodes: &mut [Node], t: Tensor, contrib: Vec<Real>) {
    let node = &mut nodes[t.0];
    if !node.requires_grad {
        return;
    }
    match node.grad {
        Some(ref mut gv) => {
            for (g, c) in gv.iter_mut().zip(contrib.iter()) {
                *g += c;
            }
        }
        None => node.grad = Some(contrib),
    }
}

/// Shared path for broadcast-aware binary ops: walks the output, asks `f`
/// for the two local derivative contributions, and accumulates them into
/// input-shaped buffers (which performs the broadcast reduction).
fn binary_contrib(
    nodes: &[Node],
    g: &[Real],
    out_shape: &[usize],
    a: Tensor,
    b: Tensor,
    contribs: &mut Vec<(Tensor, Vec<Real>)>,
    f: impl Fn(Real, Real, Real) -> (Real, Real),
) {
    let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
    let mut ga = vec![0.0 as Real; ad.len()];
    let mut gb = vec![0.0 as Real; bd.len()];
    if nodes[a.0].shape == nodes[b.0].shape {
        for i in 0..g.len() {
            let (ca, cb) = f(ad[i], bd[i], g[i]);
            ga[i] = ca;
            gb[i] = cb;
        }
    } else if out_shape == nodes[a.0].shape
        && super::ops::is_suffix(&nodes[b.0].shape, &nodes[a.0].shape)
        && !bd.is_empty()
    {
        let m = bd.len();
        for (ci, (achunk, gchunk)) in ad.chunks(m).zip(g.chunks(m)).enumerate() {
            let gachunk = &mut ga[ci * m..(ci + 1) * m];
            for j in 0..m {
                let (ca, cb) = f(achunk[j], bd[j], gchunk[j]);
                gachunk[j] = ca;
                gb[j] += cb;
            }
        }
    } else {
        let sa = broadcast_strides(&nodes[a.0].shape, out_shape);
        let sb = broadcast_strides(&nodes[b.0].shape, out_shape);
        let mut i = 0usize;
        MultiIter::new(out_shape, vec![sa, sb]).for_each(|offs| {
            let (ca, cb) = f(ad[offs[0]], bd[offs[1]], g[i]);
            ga[offs[0]] += ca;
            gb[offs[1]] += cb;
            i += 1;
        });
    }
    contribs.push((a, ga));
    contribs.push((b, gb));
}

fn matmul_backward(nodes: &[Node], g: &[Real], a: Tensor, b: Tensor) -> Result<(Vec<Real>, Vec<Real>)> {
    let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
    let (batch, m, k, n, a_off, b_off) = matmul_layout(&nodes[a.0].shape, &nodes[b.0].shape)?;
    let mut da = vec![0.0 as Real; ad.len()];
    let mut db = vec![0.0 as Real; bd.len()];
    let mut block = 0usize;
    MultiIter::new(&batch, vec![a_off, b_off]).for_each(|offs| {
        let ab = &ad[offs[0] * m * k..offs[0] * m * k + m * k];
        let bb = &bd[offs[1] * k * n..offs[1] * k * n + k * n];
        let gb = &g[block * m * n..(block + 1) * m * n];
        let dab = &mut da[offs[0] * m * k..offs[0] * m * k + m * k];
        // da[i,p] += sum_j g[i,j] * b[p,j]
        for i in 0..m {
            let grow = &gb[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &bb[p * n..(p + 1) * n];
                let mut s = 0.0 as Real;
                for (gv, bv) in grow.iter().zip(brow.iter()) {
                    s += gv * bv;
                }
                dab[i * k + p] += s;
            }
        }
        let dbb = &mut db[offs[1] * k * n..offs[1] * k * n + k * n];
        // db[p,j] += sum_i a[i,p] * g[i,j]
        for i in 0..m {
            let grow = &gb[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ab[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let drow = &mut dbb[p * n..(p + 1) * n];
                for (dv, gv) in drow.iter_mut().zip(grow.iter()) {
                    *dv += av * gv;
                }
            }
        }
        block += 1;
    });
    Ok((da, db))
}

fn layer_norm_backward(
    nodes: &[Node],
    g: &[Real],
    x: Tensor,
    gain: Tensor,
    eps: Real,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let xd = &nodes[x.0].data;
    let gd = &nodes[gain.0].data;
    let c = *nodes[x.0].shape.last().unwrap();
    let rows = xd.len() / c;
    let mut gx = vec![0.0 as Real; xd.len()];
    let mut ggain = vec![0.0 as Real; c];
    let mut gbias = vec![0.0 as Real; c];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let grow = &g[r * c..(r + 1) * c];
        let mean = row.iter().sum::<Real>() / c as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
        let inv = 1.0 / (var + eps).sqrt();
        // h = dL/dxhat, plus the two row means needed for dx.
        let mut mean_h = 0.0 as Real;
        let mut mean_hx = 0.0 as Real;
        for j in 0..c {
            let xhat = (row[j] - mean) * inv;
            let h = grow[j] * gd[j];
            mean_h += h;
            mean_hx += h * xhat;
            ggain[j] += grow[j] * xhat;
            gbias[j] += grow[j];
        }
        mean_h /= c as Real;
        mean_hx /= c as Real;
        for j in 0..c {
            let xhat = (row[j] - mean) * inv;
            let h = grow[j] * gd[j];
            gx[r * c + j] = inv * (h - mean_h - xhat * mean_hx);
        }
    }
    (gx, ggain, gbias)
}
