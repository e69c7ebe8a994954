use super::{Backward, Contributions};
use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{axis_extents, Tensor};

/// Reorder the axes of row-major `data`; output axis `d` is input axis `perm[d]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut offset = 0usize;
    loop {
        for i in 0..inner_len {
            out.push(data[offset + i * inner_stride]);
        }
        // Advance the odometer over all but the innermost axis.
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// General axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &shape, perm));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Narrow { x, axis, start };
        Ok(self.push(Tensor::from_parts(out_shape, out), op))
    }

    /// Split `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape("split", &shape, sizes));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Join tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let op = Op::Concat {
            xs: xs.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), op))
    }
}

impl Backward<'_> {
    pub(super) fn reshape(&self, x: Var) -> Contributions {
        vec![(x, self.gout.to_vec())]
    }

    pub(super) fn permute(&self, x: Var, perm: &[usize]) -> Contributions {
        let g = permute_data(self.gout, self.out.shape(), &inverse(perm));
        vec![(x, g)]
    }

    pub(super) fn narrow(&self, x: Var, axis: usize, start: usize) -> Contributions {
        let in_shape = self.val(x).shape();
        let (outer, n, inner) = axis_extents(in_shape, axis);
        let len = self.out.shape()[axis];
        let mut g = vec![0.0; self.val(x).numel()];
        for o in 0..outer {
            let dst = (o * n + start) * inner;
            let src = o * len * inner;
            g[dst..dst + len * inner].copy_from_slice(&self.gout[src..src + len * inner]);
        }
        vec![(x, g)]
    }

    pub(super) fn concat(&self, xs: &[Var], axis: usize) -> Contributions {
        let (outer, total, inner) = axis_extents(self.out.shape(), axis);
        let mut offset = 0;
        let mut result = Vec::with_capacity(xs.len());
        for &v in xs {
            let n = self.val(v).shape()[axis];
            let mut g = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                g.extend_from_slice(&self.gout[base..base + n * inner]);
            }
            offset += n;
            result.push((v, g));
        }
        result
    }
}
