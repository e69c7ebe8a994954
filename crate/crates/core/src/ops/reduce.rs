use super::{Backward, Contributions};
use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{axis_extents, Tensor};

/// LayerNorm epsilon used throughout the models.
pub const LN_EPS: f64 = 1e-6;

impl Tape {
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Exp-normalize along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    /// Normalize to zero mean and unit variance along `axis`, then apply the
    /// per-feature affine `gamma * x̂ + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        axis: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "layer_norm axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    let h = (src[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    out[at(j)] = h * g[j] + b[j];
                }
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    /// Spatial mean of a `B×C×H×W` tensor, giving `B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", &shape, &[0, 0, 0, 0]));
        }
        let hw = shape[2] * shape[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::from_parts(vec![shape[0], shape[1]], out);
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }
}

impl Backward<'_> {
    pub(super) fn sum(&self, x: Var) -> Contributions {
        vec![(x, vec![self.gout[0]; self.val(x).numel()])]
    }

    pub(super) fn mean(&self, x: Var) -> Contributions {
        let n = self.val(x).numel();
        vec![(x, vec![self.gout[0] / n as f64; n])]
    }

    pub(super) fn softmax(&self, x: Var, axis: usize) -> Contributions {
        let (outer, n, inner) = axis_extents(self.out.shape(), axis);
        let y = self.out.data();
        let mut g = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let dot: f64 = (0..n).map(|j| self.gout[at(j)] * y[at(j)]).sum();
                for j in 0..n {
                    g[at(j)] = y[at(j)] * (self.gout[at(j)] - dot);
                }
            }
        }
        vec![(x, g)]
    }

    pub(super) fn layer_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: &[f64],
        rstd: &[f64],
    ) -> Contributions {
        let (outer, n, inner) = axis_extents(self.out.shape(), axis);
        let gvals = self.val(gamma).data();
        let mut gx = vec![0.0; xhat.len()];
        let mut gg = vec![0.0; n];
        let mut gb = vec![0.0; n];
        let nf = n as f64;
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..n {
                    let dy = self.gout[at(j)];
                    gg[j] += dy * xhat[at(j)];
                    gb[j] += dy;
                    let d = dy * gvals[j];
                    sum_d += d;
                    sum_dx += d * xhat[at(j)];
                }
                let r = rstd[o * inner + i];
                for j in 0..n {
                    let d = self.gout[at(j)] * gvals[j];
                    gx[at(j)] = r / nf * (nf * d - sum_d - xhat[at(j)] * sum_dx);
                }
            }
        }
        vec![(x, gx), (gamma, gg), (beta, gb)]
    }

    pub(super) fn global_avg_pool(&self, x: Var) -> Contributions {
        let shape = self.val(x).shape();
        let hw = shape[2] * shape[3];
        let g = self
            .gout
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
            .collect();
        vec![(x, g)]
    }
}
