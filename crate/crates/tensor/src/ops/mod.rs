//! Forward primitives and their adjoints.

mod attention;
mod basic;
mod conv;
mod loss;
mod norm;
mod pool;

pub use norm::BatchNormConfig;

use crate::graph::{GradBuf, Graph, Op, Var};
use crate::real::Real;

impl<T: Real> Graph<T> {
    pub(crate) fn backprop(&self, out: Var, op: &Op<T>, g: &[T], buf: &mut GradBuf<'_, T>) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Reshape(x) => buf.add(*x, g),
            Op::Add(a, b) => {
                buf.add(*a, g);
                buf.add(*b, g);
            }
            Op::Sub(a, b) => {
                buf.add(*a, g);
                if let Some(s) = buf.slot(*b) {
                    for (d, &v) in s.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => self.mul_backward(*a, *b, g, buf),
            Op::Scale(x, c) => {
                if let Some(s) = buf.slot(*x) {
                    for (d, &v) in s.iter_mut().zip(g) {
                        *d += v * *c;
                    }
                }
            }
            Op::Relu(x) => self.relu_backward(*x, g, buf),
            Op::Silu(x) => self.silu_backward(*x, g, buf),
            Op::Sum(x) => {
                if let Some(s) = buf.slot(*x) {
                    for d in s.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(s) = buf.slot(*x) {
                    let scale = g[0] / T::of(s.len() as f64);
                    for d in s.iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::Concat(a, b) => self.concat_backward(*a, *b, g, buf),
            Op::AddChannelBias { x, b } => self.channel_bias_backward(*x, *b, g, buf),
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, buf),
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, buf),
            Op::Upsample2x(x) => self.upsample_backward(*x, g, buf),
            Op::MaxPool { x, argmax } => {
                if let Some(s) = buf.slot(*x) {
                    for (&i, &v) in argmax.iter().zip(g) {
                        s[i] += v;
                    }
                }
            }
            Op::AdaptiveAvgPool { x, out_hw } => self.adaptive_pool_backward(*x, *out_hw, g, buf),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => self.batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, *train, g, buf),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, xhat, inv_std, g, buf),
            Op::Dropout { x, mask } => {
                if let Some(s) = buf.slot(*x) {
                    for ((d, &v), &m) in s.iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::Softmax(x) => self.softmax_backward(out, *x, g, buf),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => self.cross_entropy_backward(*logits, labels, probs, g, buf),
            Op::Embedding { table, ids } => self.embedding_backward(*table, ids, g, buf),
            Op::Attention { q, k, v, probs } => self.attention_backward(*q, *k, *v, probs, g, buf),
            Op::WeightedSse {
                pred,
                target,
                weights,
            } => self.weighted_sse_backward(*pred, target, weights, g, buf),
        }
    }
}
