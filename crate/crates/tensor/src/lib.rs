//! Minimal dense tensor engine with tape-based reverse-mode differentiation.
//!
//! The primitive inventory is deliberately small: exactly what a UNet-style
//! denoiser and two small CNN classifiers need. Every primitive has a
//! hand-written adjoint that is verified against central finite differences
//! (see [`gradcheck`]).
//!
//! Values are generic over [`Real`] (`f32` for training, `f64` for
//! verification). All kernels are single-threaded and bit-deterministic.

mod error;
mod graph;
mod kernels;
mod ops;
mod optim;
mod params;
mod real;
mod tensor;

pub mod gradcheck;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Mode, Var};
pub use kernels::{conv2d_direct, gemm, ConvGeom};
pub use ops::BatchNormConfig;
pub use optim::{Adam, AdamConfig, NonFinitePolicy};
pub use params::{ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;
