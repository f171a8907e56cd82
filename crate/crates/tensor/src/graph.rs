use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::ConvGeom;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Train mode uses batch statistics and live dropout masks; eval mode uses
/// running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: Var,
        out_hw: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    WeightedSse {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            Reshape(x) | Scale(x, _) | Relu(x) | Silu(x) | Sum(x) | Mean(x) | Upsample2x(x)
            | Softmax(x) => vec![*x],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Concat(a, b) => vec![*a, *b],
            AddChannelBias { x, b } => vec![*x, *b],
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            MaxPool { x, .. } | AdaptiveAvgPool { x, .. } | Dropout { x, .. } => vec![*x],
            BatchNorm { x, gamma, beta, .. } | GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            CrossEntropy { logits, .. } => vec![*logits],
            Embedding { table, .. } => vec![*table],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            WeightedSse { pred, .. } => vec![*pred],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A recorded forward computation (the gradient tape).
///
/// Every primitive appends one node; [`Graph::backward`] replays the
/// adjoints in reverse order.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) mode: Mode,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) buffer_updates: Vec<(ParamId, Tensor<T>)>,
    trap_non_finite: bool,
}

impl<T: Real> Graph<T> {
    /// `seed` drives dropout masks in train mode.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
            trap_non_finite: false,
        }
    }

    /// Fail any primitive whose output contains NaN or infinity.
    pub fn trap_non_finite(mut self, on: bool) -> Self {
        self.trap_non_finite = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Input that receives a gradient.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a parameter into the graph. Buffers never receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            requires_grad: store.is_trainable(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.trap_non_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Running-statistic updates produced by train-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Writes pending buffer updates into `store`.
    pub fn commit_buffers(&mut self, store: &mut ParamStore<T>) {
        for (id, t) in self.take_buffer_updates() {
            *store.get_mut(id) = t;
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let dims = self.dims(loss);
        if dims.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(dims.to_vec()));
        }
        let seed = Tensor::full(dims, T::one());
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an explicit output adjoint.
    pub fn backward_with(&self, out: Var, adjoint: Tensor<T>) -> Result<Gradients<T>> {
        if adjoint.dims() != self.dims(out) {
            return Err(TensorError::Shape {
                op: "backward",
                detail: format!("adjoint {:?} vs output {:?}", adjoint.dims(), self.dims(out)),
            });
        }
        let mut buf = GradBuf {
            nodes: &self.nodes,
            slots: (0..self.nodes.len()).map(|_| None).collect(),
        };
        buf.slots[out.0] = Some(adjoint);
        let mut params = BTreeMap::new();
        let mut leaves = BTreeMap::new();
        for i in (0..=out.0).rev() {
            let Some(g) = buf.slots[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Param(id) => match params.get_mut(id) {
                    None => {
                        params.insert(*id, g);
                    }
                    Some(acc) => {
                        let acc: &mut Tensor<T> = acc;
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                },
                op => self.backprop(Var(i), op, g.data(), &mut buf),
            }
        }
        Ok(Gradients { params, leaves })
    }
}

/// Adjoint accumulation buffer used during the reverse pass.
pub(crate) struct GradBuf<'a, T> {
    nodes: &'a [Node<T>],
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradBuf<'_, T> {
    /// Mutable adjoint of `v`, or `None` if `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let s = &mut self.slots[v.0];
        if s.is_none() {
            *s = Some(Tensor::zeros(node.value.dims()));
        }
        s.as_mut().map(|t| t.data_mut())
    }

    pub(crate) fn add(&mut self, v: Var, g: &[T]) {
        if let Some(s) = self.slot(v) {
            for (a, &b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all parameter gradients in place.
    pub fn scale(&mut self, factor: T) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
