use super::{Backward, Contributions};
use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `out += op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape
/// `k×p`. A transposed operand is stored as its transpose (`a: k×m`,
/// `b: p×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    p: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
) {
    if tb {
        let bt = transpose(p, k, b);
        return gemm(m, k, p, a, ta, &bt, false, out);
    }
    // Element (i, kk) of op(a).
    let (ar, ac) = if ta { (1, m) } else { (k, 1) };
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let (o0, rest) = out[i * p..(i + 4) * p].split_at_mut(p);
        let (o1, rest) = rest.split_at_mut(p);
        let (o2, o3) = rest.split_at_mut(p);
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let at = |r: usize| a[(i + r) * ar + kk * ac];
            let (a0, a1, a2, a3) = (at(0), at(1), at(2), at(3));
            let rows = o0
                .iter_mut()
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut());
            for ((((x0, x1), x2), x3), &bv) in rows.zip(brow) {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
    }
    for i in m4..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * ar + kk * ac];
            for (o, &bv) in row.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += aik * bv;
            }
        }
    }
}

impl Tape {
    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        self.bmm(a, b, false, false)
    }

    /// Batched matrix product over the trailing two axes. Leading axes must
    /// agree exactly. `trans_a`/`trans_b` read the corresponding operand's
    /// last two axes transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        let rb = sb.len();
        if ra < 2 || ra != rb || sa[..ra - 2] != sb[..rb - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = if trans_a {
            (sa[ra - 1], sa[ra - 2])
        } else {
            (sa[ra - 2], sa[ra - 1])
        };
        let (k2, p) = if trans_b {
            (sb[rb - 1], sb[rb - 2])
        } else {
            (sb[rb - 2], sb[rb - 1])
        };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out_shape = sa[..ra - 2].to_vec();
        out_shape.extend([m, p]);

        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * p];
        for n in 0..batch {
            gemm(
                m,
                k,
                p,
                &da[n * m * k..(n + 1) * m * k],
                trans_a,
                &db[n * k * p..(n + 1) * k * p],
                trans_b,
                &mut out[n * m * p..(n + 1) * m * p],
            );
        }
        self.add_macs(batch * m * k * p);
        let op = Op::Matmul {
            a,
            b,
            trans_a,
            trans_b,
            batch,
            m,
            k,
            p,
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), op))
    }

    /// `x · w + bias` over the last axis of `x`; `w` is `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let last = *shape.last().expect("tensors have at least one axis");
        if ws.len() != 2 || ws[0] != last {
            return Err(Error::shape("linear", &shape, &ws));
        }
        let rows = shape.iter().product::<usize>() / last;
        let flat = self.reshape(x, &[rows, last])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, bias, 1)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }
}

impl Backward<'_> {
    pub(super) fn matmul(
        &self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        (batch, m, k, p): (usize, usize, usize, usize),
    ) -> Contributions {
        let (da, db) = (self.val(a).data(), self.val(b).data());
        let (sa, sb, so) = (m * k, k * p, m * p);
        let mut ga = vec![0.0; batch * sa];
        let mut gb = vec![0.0; batch * sb];
        for n in 0..batch {
            let g = &self.gout[n * so..(n + 1) * so];
            let an = &da[n * sa..(n + 1) * sa];
            let bn = &db[n * sb..(n + 1) * sb];
            if self.needs(a) {
                let d = &mut ga[n * sa..(n + 1) * sa];
                if trans_a {
                    // dA = B_eff · dYᵀ
                    gemm(k, p, m, bn, trans_b, g, true, d);
                } else {
                    // dA = dY · B_effᵀ
                    gemm(m, p, k, g, false, bn, !trans_b, d);
                }
            }
            if self.needs(b) {
                let d = &mut gb[n * sb..(n + 1) * sb];
                if trans_b {
                    // dB = dYᵀ · A_eff
                    gemm(p, m, k, g, true, an, trans_a, d);
                } else {
                    // dB = A_effᵀ · dY
                    gemm(k, m, p, an, !trans_a, g, false, d);
                }
            }
        }
        vec![(a, ga), (b, gb)]
    }
}
