//! Minimal differentiable-computation kernel.
//!
//! Dense `f64` tensors, a tape-based reverse-mode [`Graph`], the handful of
//! layers the two FLMD stages need (affine maps, LSTM cell, block-wise
//! multi-head attention, Gaussian KL, reparameterized sampling, BCE), Adam,
//! and a JSON checkpoint format. Every backward rule is verified against
//! [`gradcheck`].

pub mod checkpoint;
mod error;
pub mod functional;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use error::{KernelError, Result};
pub use graph::{sigmoid, Gradients, Graph, Likelihood, Var, PROB_EPS};
pub use optim::{adam_step, AdamConfig, OptState};
pub use params::ParamStore;
pub use tensor::Tensor;
