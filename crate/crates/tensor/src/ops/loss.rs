use crate::error::{shape_err, Result};
use crate::graph::{GradBuf, Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

use super::basic::softmax_row;

impl<T: Real> Graph<T> {
    /// Mean cross-entropy of logits `[N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.dims(logits) else {
            return shape_err("cross_entropy", format!("{:?}", self.dims(logits)));
        };
        if labels.len() != n {
            return shape_err("cross_entropy", format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err("cross_entropy", format!("label {bad} with {k} classes"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[l];
            softmax_row(row);
        }
        let t = Tensor::scalar(loss / T::of(n as f64));
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub(crate) fn cross_entropy_backward(
        &self,
        logits: Var,
        labels: &[usize],
        probs: &[T],
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let k = self.dims(logits)[1];
        let scale = g[0] / T::of(labels.len() as f64);
        if let Some(s) = buf.slot(logits) {
            for (r, &l) in labels.iter().enumerate() {
                for j in 0..k {
                    let onehot = if j == l { T::one() } else { T::zero() };
                    s[r * k + j] += scale * (probs[r * k + j] - onehot);
                }
            }
        }
    }

    /// `(1/N) Σ_i w_i ‖pred_i − target_i‖²` over the leading axis.
    pub fn weighted_sse(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let dims = self.dims(pred).to_vec();
        if target.dims() != dims.as_slice() || weights.len() != dims[0] {
            return shape_err(
                "weighted_sse",
                format!("pred {dims:?}, target {:?}, {} weights", target.dims(), weights.len()),
            );
        }
        let n = dims[0];
        let per = target.numel() / n;
        let p = self.value(pred).data();
        let mut total = T::zero();
        for i in 0..n {
            let sse: T = p[i * per..(i + 1) * per]
                .iter()
                .zip(&target.data()[i * per..(i + 1) * per])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            total += weights[i] * sse;
        }
        let t = Tensor::scalar(total / T::of(n as f64));
        self.push(
            "weighted_sse",
            t,
            Op::WeightedSse {
                pred,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    pub(crate) fn weighted_sse_backward(
        &self,
        pred: Var,
        target: &[T],
        weights: &[T],
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let n = weights.len();
        let per = target.len() / n;
        let p = self.value(pred).data();
        let two = T::of(2.0) * g[0] / T::of(n as f64);
        if let Some(s) = buf.slot(pred) {
            for i in 0..n {
                for j in i * per..(i + 1) * per {
                    s[j] += two * weights[i] * (p[j] - target[j]);
                }
            }
        }
    }
}
