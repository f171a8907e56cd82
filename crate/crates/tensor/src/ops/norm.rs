use crate::error::{shape_err, Result};
use crate::graph::{GradBuf, Graph, Mode, Op, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Batch-norm hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the current batch in the running-statistic update.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

fn check_affine(op: &'static str, dims: &[usize], c: usize, gd: &[usize], bd: &[usize]) -> Result<()> {
    if dims.len() < 2 || gd != [c] || bd != [c] {
        return shape_err(op, format!("x {dims:?}, gamma {gd:?}, beta {bd:?}"));
    }
    Ok(())
}

/// Adjoint of `xhat = (x - mean) * inv_std` for one statistics group.
fn normalize_backward<T: Real>(dxhat: &[T], xhat: &[T], inv_std: T, out: &mut [T]) {
    let m = T::of(dxhat.len() as f64);
    let sum_d: T = dxhat.iter().copied().sum();
    let sum_dx: T = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
    for i in 0..dxhat.len() {
        out[i] += inv_std / m * (m * dxhat[i] - sum_d - xhat[i] * sum_dx);
    }
}

impl<T: Real> Graph<T> {
    /// Batch normalization over all axes except channel axis 1.
    ///
    /// Train mode normalizes with batch statistics and schedules a
    /// running-statistic update (see [`Graph::commit_buffers`]); eval mode
    /// normalizes with the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let c = dims.get(1).copied().unwrap_or(0);
        check_affine("batch_norm", &dims, c, self.dims(gamma), self.dims(beta))?;
        let n = dims[0];
        let s: usize = dims[2..].iter().product();
        let m = n * s;
        let xs = self.value(x).data();
        let eps = T::of(cfg.eps);
        let train = self.mode == Mode::Train;

        let (mean, var): (Vec<T>, Vec<T>) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..n {
                    acc += xs[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
                }
                mean[ch] = acc / T::of(m as f64);
                let mut sq = T::zero();
                for i in 0..n {
                    for &v in &xs[(i * c + ch) * s..(i * c + ch + 1) * s] {
                        sq += (v - mean[ch]) * (v - mean[ch]);
                    }
                }
                var[ch] = sq / T::of(m as f64);
            }
            (mean, var)
        } else {
            (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for j in r {
                    xhat[j] = (xs[j] - mean[ch]) * inv_std[ch];
                    out[j] = gam[ch] * xhat[j] + bet[ch];
                }
            }
        }
        if train {
            let mom = T::of(cfg.momentum);
            let unbias = if m > 1 {
                T::of(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            let rm = store.get(running_mean);
            let rv = store.get(running_var);
            let new_mean = rm.data().iter().zip(&mean).map(|(&r, &b)| (T::one() - mom) * r + mom * b).collect();
            let new_var = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias)
                .collect();
            self.buffer_updates.push((running_mean, Tensor::new(&[c], new_mean)?));
            self.buffer_updates.push((running_var, Tensor::new(&[c], new_var)?));
        }
        let t = Tensor::new(&dims, out)?;
        self.push(
            "batch_norm",
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        train: bool,
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let dims = self.dims(x);
        let (n, c) = (dims[0], dims[1]);
        let s: usize = dims[2..].iter().product();
        if let Some(sg) = buf.slot(gamma) {
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                    sg[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        if let Some(sb) = buf.slot(beta) {
            for i in 0..n {
                for ch in 0..c {
                    sb[ch] += g[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
                }
            }
        }
        let gam = self.value(gamma).data();
        if let Some(sx) = buf.slot(x) {
            if !train {
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            sx[j] += g[j] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                return;
            }
            // gather each channel across the batch so the group formula applies
            let m = n * s;
            let mut dxhat = vec![T::zero(); m];
            let mut xh = vec![T::zero(); m];
            let mut dx = vec![T::zero(); m];
            for ch in 0..c {
                for i in 0..n {
                    let r = (i * c + ch) * s;
                    for j in 0..s {
                        dxhat[i * s + j] = g[r + j] * gam[ch];
                        xh[i * s + j] = xhat[r + j];
                    }
                }
                dx.fill(T::zero());
                normalize_backward(&dxhat, &xh, inv_std[ch], &mut dx);
                for i in 0..n {
                    let r = (i * c + ch) * s;
                    for j in 0..s {
                        sx[r + j] += dx[i * s + j];
                    }
                }
            }
        }
    }

    /// Group normalization of `[N, C, ...]` with `groups` contiguous channel
    /// groups and per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let c = dims.get(1).copied().unwrap_or(0);
        check_affine("group_norm", &dims, c, self.dims(gamma), self.dims(beta))?;
        if groups == 0 || c % groups != 0 {
            return shape_err("group_norm", format!("{c} channels into {groups} groups"));
        }
        let n = dims[0];
        let s: usize = dims[2..].iter().product();
        let cg = c / groups;
        let gsize = cg * s;
        let xs = self.value(x).data();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = Vec::with_capacity(n * groups);
        for (gi, chunk) in xs.chunks(gsize).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() / T::of(gsize as f64);
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(gsize as f64);
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let base = gi * gsize;
            let ch0 = (gi % groups) * cg;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = ch0 + j / s;
                let xh = (v - mean) * inv;
                xhat[base + j] = xh;
                out[base + j] = gam[ch] * xh + bet[ch];
            }
        }
        let t = Tensor::new(&dims, out)?;
        self.push(
            "group_norm",
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: &[T],
        inv_std: &[T],
        g: &[T],
        buf: &mut GradBuf<'_, T>,
    ) {
        let dims = self.dims(x);
        let c = dims[1];
        let s: usize = dims[2..].iter().product();
        let cg = c / groups;
        let gsize = cg * s;
        if let Some(sg) = buf.slot(gamma) {
            for (row, (gc, xc)) in g.chunks(s).zip(xhat.chunks(s)).enumerate() {
                sg[row % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        if let Some(sb) = buf.slot(beta) {
            for (row, gc) in g.chunks(s).enumerate() {
                sb[row % c] += gc.iter().copied().sum::<T>();
            }
        }
        let gam = self.value(gamma).data();
        if let Some(sx) = buf.slot(x) {
            let mut dxhat = vec![T::zero(); gsize];
            for (gi, inv) in inv_std.iter().enumerate() {
                let base = gi * gsize;
                let ch0 = (gi % groups) * cg;
                for j in 0..gsize {
                    dxhat[j] = g[base + j] * gam[ch0 + j / s];
                }
                normalize_backward(&dxhat, &xhat[base..base + gsize], *inv, &mut sx[base..base + gsize]);
            }
        }
    }
}
