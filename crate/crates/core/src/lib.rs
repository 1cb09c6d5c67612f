//! Amortized posterior sampling for linear inverse problems: a score-based
//! diffusion prior is distilled into a conditional normalizing flow that maps
//! (noise, measurement) to a posterior sample in a single forward pass.
//!
//! The crate is self-contained: dense-tensor autodiff, VP-SDE diffusion
//! machinery, a trainable score network with analytic oracles, a conditional
//! RealNVP flow, the distillation objective, forward operators and toy data,
//! iterative baseline samplers, and an evaluation harness.

pub mod config;
pub mod container;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod flow;
pub mod harness;
pub mod linalg;
pub mod operators;
pub mod optim;
pub mod rng;
pub mod samplers;
pub mod score;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
