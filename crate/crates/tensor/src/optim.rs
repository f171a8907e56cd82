use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// What to do when a gradient contains NaN or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonFinitePolicy {
    /// Return an error and leave parameters untouched.
    Trap,
    /// Skip the whole update (step counter is not advanced).
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `true`: AdamW (decay applied to weights); `false`: L2 added to gradient.
    pub decoupled: bool,
    pub non_finite: NonFinitePolicy,
}

impl AdamConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled: false,
            non_finite: NonFinitePolicy::Trap,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            decoupled: true,
            ..Self::adam(lr, weight_decay)
        }
    }
}

/// Adam / AdamW with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros: Vec<Tensor<T>> = ids.iter().map(|&id| Tensor::zeros(store.get(id).dims())).collect();
        Adam {
            config,
            names: ids.iter().map(|&id| store.name(id).to_string()).collect(),
            ids,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns `false` if the step was skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<bool> {
        for (&id, name) in self.ids.iter().zip(&self.names) {
            if store.name(id) != name || store.get(id).dims() != self.m[self.index_of(id)].dims() {
                return Err(TensorError::StateMismatch(name.clone()));
            }
            if let Some(g) = grads.param(id) {
                if !g.is_finite() {
                    return match self.config.non_finite {
                        NonFinitePolicy::Trap => Err(TensorError::NonFiniteGradient(name.clone())),
                        NonFinitePolicy::Skip => Ok(false),
                    };
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let lr = T::of(c.lr);
        let wd = T::of(c.weight_decay);
        let (bc1, bc2, eps) = (T::of(bc1), T::of(bc2), T::of(c.eps));
        let shrink = T::one() - lr * wd;
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(id) else {
                continue;
            };
            let p = store.get_mut(id).data_mut();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for i in 0..p.len() {
                let mut gi = g.data()[i];
                if c.decoupled {
                    p[i] *= shrink;
                } else {
                    gi += wd * p[i];
                }
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(true)
    }

    fn index_of(&self, id: ParamId) -> usize {
        self.ids.iter().position(|&i| i == id).expect("tracked id")
    }

    /// Moment tensors named `optim/m/<param>` and `optim/v/<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.names.len());
        for (i, name) in self.names.iter().enumerate() {
            out.push((format!("optim/m/{name}"), self.m[i].clone()));
            out.push((format!("optim/v/{name}"), self.v[i].clone()));
        }
        out
    }

    /// Restores moments and step counter saved by [`Adam::state_tensors`].
    pub fn restore<'a>(
        &mut self,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<()> {
        for i in 0..self.names.len() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("optim/{prefix}/{}", self.names[i]);
                let t = lookup(&key).ok_or_else(|| TensorError::UnknownParam(key.clone()))?;
                if t.dims() != slot.dims() {
                    return Err(TensorError::StateMismatch(key));
                }
                *slot = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}
