use super::{Backward, Contributions};
use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{axis_extents, Tensor};

/// `x * clamp(x + 3, 0, 6) / 6`
pub fn hardswish_scalar(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

fn hardswish_grad(x: f64) -> f64 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}

/// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    fn binary(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, &[f64], &[f64])> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((sa.to_vec(), self.value(a).data(), self.value(b).data()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary("add", a, b)?;
        let data = da.iter().zip(db).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary("sub", a, b)?;
        let data = da.iter().zip(db).map(|(x, y)| x - y).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary("mul", a, b)?;
        let data = da.iter().zip(db).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Scale(x, c))
    }

    /// Add a vector along `axis`, broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bshape = self.shape(bias);
        if axis >= shape.len() || bshape.len() != 1 || bshape[0] != shape[axis] {
            return Err(Error::shape("add_bias", &shape, bshape));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (j, &bj) in b.iter().enumerate().take(n) {
                let base = (o * n + j) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bj);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::AddBias { x, bias, axis },
        ))
    }

    /// Multiply every slice along axis 0 by its own constant factor.
    pub fn scale_batch(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if factors.len() != shape[0] {
            return Err(Error::shape("scale_batch", &shape, &[factors.len()]));
        }
        let per = self.value(x).numel() / shape[0];
        let data = self
            .value(x)
            .data()
            .chunks(per)
            .zip(&factors)
            .flat_map(|(chunk, &f)| chunk.iter().map(move |v| v * f))
            .collect();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ScaleBatch { x, factors },
        ))
    }

    pub fn hardswish(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| hardswish_scalar(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Hardswish(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Gelu(x))
    }
}

impl Backward<'_> {
    pub(super) fn add(&self, a: Var, b: Var) -> Contributions {
        vec![(a, self.gout.to_vec()), (b, self.gout.to_vec())]
    }

    pub(super) fn sub(&self, a: Var, b: Var) -> Contributions {
        vec![
            (a, self.gout.to_vec()),
            (b, self.gout.iter().map(|g| -g).collect()),
        ]
    }

    pub(super) fn mul(&self, a: Var, b: Var) -> Contributions {
        let (da, db) = (self.val(a).data(), self.val(b).data());
        let ga = self.gout.iter().zip(db).map(|(g, y)| g * y).collect();
        let gb = self.gout.iter().zip(da).map(|(g, x)| g * x).collect();
        vec![(a, ga), (b, gb)]
    }

    pub(super) fn scale(&self, x: Var, c: f64) -> Contributions {
        vec![(x, self.gout.iter().map(|g| g * c).collect())]
    }

    pub(super) fn add_bias(&self, x: Var, bias: Var, axis: usize) -> Contributions {
        let (outer, n, inner) = axis_extents(self.out.shape(), axis);
        let mut gb = vec![0.0; n];
        if self.needs(bias) {
            for o in 0..outer {
                for (j, acc) in gb.iter_mut().enumerate() {
                    let base = (o * n + j) * inner;
                    *acc += self.gout[base..base + inner].iter().sum::<f64>();
                }
            }
        }
        vec![(x, self.gout.to_vec()), (bias, gb)]
    }

    pub(super) fn scale_batch(&self, x: Var, factors: &[f64]) -> Contributions {
        let per = self.gout.len() / factors.len();
        let g = self
            .gout
            .chunks(per)
            .zip(factors)
            .flat_map(|(chunk, &f)| chunk.iter().map(move |v| v * f))
            .collect();
        vec![(x, g)]
    }

    pub(super) fn hardswish(&self, x: Var) -> Contributions {
        let g = self
            .val(x)
            .data()
            .iter()
            .zip(self.gout)
            .map(|(&v, g)| g * hardswish_grad(v))
            .collect();
        vec![(x, g)]
    }

    pub(super) fn gelu(&self, x: Var) -> Contributions {
        let g = self
            .val(x)
            .data()
            .iter()
            .zip(self.gout)
            .map(|(&v, g)| g * gelu_grad(v))
            .collect();
        vec![(x, g)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hardswish_reference_points() {
        assert_eq!(hardswish_scalar(0.0), 0.0);
        assert_eq!(hardswish_scalar(-3.0), 0.0);
        assert_eq!(hardswish_scalar(3.0), 3.0);
        assert!((hardswish_scalar(1.0) - 4.0 / 6.0).abs() < 1e-15);
        assert!((hardswish_scalar(1.0) - 0.6667).abs() < 1e-4);
        assert_eq!(hardswish_scalar(10.0), 10.0);
        assert_eq!(hardswish_scalar(-10.0), 0.0);
    }

    #[test]
    fn gelu_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn add_bias_broadcasts_over_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let b = tape.constant(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let y = tape.add_bias(x, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, -1.0, -1.0]);
    }
}
