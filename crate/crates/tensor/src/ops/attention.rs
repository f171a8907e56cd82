use crate::error::{shape_err, Result};
use crate::graph::{GradBuf, Graph, Op, Var};
use crate::kernels::gemm;
use crate::real::Real;
use crate::tensor::Tensor;

use super::basic::softmax_row;

impl<T: Real> Graph<T> {
    /// Single-head scaled dot-product attention over positions.
    ///
    /// `q`, `k`, `v` are channel-major `[N, C, S]`; position `i` attends to
    /// position `j` with weight `softmax_j(q_i · k_j / √C)`. Output is `[N, C, S]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let dq = self.dims(q).to_vec();
        if dq.len() != 3 || self.dims(k) != dq || self.dims(v) != dq {
            return shape_err(
                "attention",
                format!("q {dq:?}, k {:?}, v {:?}", self.dims(k), self.dims(v)),
            );
        }
        let (n, c, s) = (dq[0], dq[1], dq[2]);
        let scale = T::of(1.0 / (c as f64).sqrt());
        let mut probs = vec![T::zero(); n * s * s];
        let mut out = vec![T::zero(); n * c * s];
        for i in 0..n {
            let qi = self.value(q).outer(i);
            let ki = self.value(k).outer(i);
            let vi = self.value(v).outer(i);
            let p = &mut probs[i * s * s..(i + 1) * s * s];
            gemm(s, c, s, qi, true, ki, false, p, false);
            for row in p.chunks_mut(s) {
                for val in row.iter_mut() {
                    *val *= scale;
                }
                softmax_row(row);
            }
            gemm(c, s, s, vi, false, p, true, &mut out[i * c * s..(i + 1) * c * s], false);
        }
        let t = Tensor::new(&dq, out)?;
        self.push("attention", t, Op::Attention { q, k, v, probs })
    }

    pub(crate) fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[T],
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let &[n, c, s] = self.dims(q) else { return };
        let scale = T::of(1.0 / (c as f64).sqrt());
        let mut dp = vec![T::zero(); s * s];
        for i in 0..n {
            let p = &probs[i * s * s..(i + 1) * s * s];
            let go = &g[i * c * s..(i + 1) * c * s];
            if let Some(sv) = buf.slot(v) {
                gemm(c, s, s, go, false, p, false, &mut sv[i * c * s..(i + 1) * c * s], true);
            }
            // dP = dOᵀ V, then softmax adjoint, then the 1/√C scale
            gemm(s, c, s, go, true, self.value(v).outer(i), false, &mut dp, false);
            for (drow, prow) in dp.chunks_mut(s).zip(p.chunks(s)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for j in 0..s {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
            }
            if let Some(sq) = buf.slot(q) {
                gemm(c, s, s, self.value(k).outer(i), false, &dp, true, &mut sq[i * c * s..(i + 1) * c * s], true);
            }
            if let Some(sk) = buf.slot(k) {
                gemm(c, s, s, self.value(q).outer(i), false, &dp, false, &mut sk[i * c * s..(i + 1) * c * s], true);
            }
        }
    }

    /// Attention weights (rows sum to one) of a recorded attention node.
    pub fn attention_weights(&self, out: Var) -> Option<&[T]> {
        match &self.nodes[out.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }
}
