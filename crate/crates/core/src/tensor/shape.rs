//! Shape arithmetic shared by the forward kernels and their backward passes.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides in element units.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// NumPy-style right-aligned broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = dim_from_right(a, rank - 1 - i);
        let bd = dim_from_right(b, rank - 1 - i);
        out[i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return None;
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Strides of `shape` viewed as `out_shape`, with 0 where a dimension is
/// broadcast (extent 1 or missing).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut r = vec![0usize; rank];
    for i in 0..shape.len() {
        r[offset + i] = if shape[i] == out_shape[offset + i] && shape[i] != 0 {
            own[i]
        } else {
            0
        };
        if shape[i] == 1 {
            r[offset + i] = 0;
        }
    }
    r
}

/// Odometer over a shape that tracks flat offsets into several tensors at
/// once, each with its own (possibly zero) strides.
pub struct MultiIter {
    shape: Vec<usize>,
    strides: Vec<Vec<usize>>,
    idx: Vec<usize>,
    offs: Vec<usize>,
    remaining: usize,
}

impl MultiIter {
    pub fn new(shape: &[usize], strides: Vec<Vec<usize>>) -> Self {
        let n = numel(shape);
        MultiIter {
            shape: shape.to_vec(),
            offs: vec![0; strides.len()],
            strides,
            idx: vec![0; shape.len()],
            remaining: n,
        }
    }

    /// Calls `f(offsets)` once per element in row-major order.
    pub fn for_each(mut self, mut f: impl FnMut(&[usize])) {
        while self.remaining > 0 {
            f(&self.offs);
            self.remaining -= 1;
            let mut d = self.shape.len();
            while d > 0 {
                d -= 1;
                self.idx[d] += 1;
                for (o, s) in self.offs.iter_mut().zip(self.strides.iter()) {
                    *o += s[d];
                }
                if self.idx[d] < self.shape[d] {
                    break;
                }
                self.idx[d] = 0;
                for (o, s) in self.offs.iter_mut().zip(self.strides.iter()) {
                    *o -= s[d] * self.shape[d];
                }
            }
        }
    }
}

/// Decomposes `shape` around `axis` into (outer, len, inner) extents so a
/// reduction along `axis` walks lanes of stride `inner`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_basic() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shapes(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn multi_iter_tracks_broadcast_offsets() {
        // a: [2,3], b: [3] broadcast over rows.
        let out = vec![2usize, 3];
        let sa = broadcast_strides(&[2, 3], &out);
        let sb = broadcast_strides(&[3], &out);
        let mut seen = Vec::new();
        MultiIter::new(&out, vec![sa, sb]).for_each(|offs| seen.push((offs[0], offs[1])));
        assert_eq!(seen, vec![(0, 0), (1, 1), (2, 2), (3, 0), (4, 1), (5, 2)]);
    }

    #[test]
    fn axis_split_midline() {
        assert_eq!(axis_split(&[2, 5, 3], 1), (2, 5, 3));
        assert_eq!(axis_split(&[4], 0), (1, 4, 1));
    }
}
