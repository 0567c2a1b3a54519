//! Conditional generative models for annual hourly building-meter data.

pub mod baselines;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod models;
pub mod plots;
pub mod seeds;
pub mod tensor_io;
pub mod training;

pub use error::{Error, Result};
