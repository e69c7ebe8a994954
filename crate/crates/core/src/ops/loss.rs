use super::{Backward, Contributions};
use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed with a max-shifted log-sum-exp. `logits` is `B×C`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; data.len()];
        let mut total = 0.0;
        for (row, (&label, p)) in data
            .chunks(classes)
            .zip(labels.iter().zip(probs.chunks_mut(classes)))
        {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - lse).exp();
            }
        }
        let loss = total / labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op))
    }
}

impl Backward<'_> {
    pub(super) fn cross_entropy(
        &self,
        logits: Var,
        labels: &[usize],
        probs: &[f64],
    ) -> Contributions {
        let classes = probs.len() / labels.len();
        let scale = self.gout[0] / labels.len() as f64;
        let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        for (i, &l) in labels.iter().enumerate() {
            g[i * classes + l] -= scale;
        }
        vec![(logits, g)]
    }
}
