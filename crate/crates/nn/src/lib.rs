//! Minimal CPU tensor library with reverse-mode autodiff.
//!
//! Covers what the meter-data generative models need: strided 2D
//! convolutions and their transposes, dense layers, pointwise activations,
//! feature-wise modulation, and the losses used for training. Everything is
//! generic over [`Real`] so gradients can be verified in `f64`.

pub mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use graph::{Activation, Gradients, Graph, Var};
pub use layers::{Conv2d, ConvTranspose2d, Linear};
pub use optim::Adam;
pub use params::ParamStore;
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter set mismatch: {0}")]
    ParamSet(String),
}
