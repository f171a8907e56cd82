//! Class-conditional synthetic specific-force generation.
//!
//! Tri-axial accelerometer windows are rearranged into delay-embedded images
//! ([`embedding`]), a preconditioned denoiser ([`denoiser`]) is trained on
//! those images with a noise-level-weighted objective and sampled with a
//! second-order probability-flow ODE solver ([`diffusion`]), and generated
//! images are mapped back to signals. Synthetic data is validated against
//! real data with two CNN placement classifiers ([`classifiers`]) and
//! distribution metrics ([`evaluation`]).

pub mod classifiers;
pub mod config;
pub mod container;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
mod error;
pub mod evaluation;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
