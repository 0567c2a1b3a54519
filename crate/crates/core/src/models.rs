//! Pieces shared by the three model families: the kind tag, the generator
//! interface the evaluation code consumes, and tensor conversions.

use std::fmt;
use std::str::FromStr;

use meterdiff_nn::{Real, Tensor};
use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::{ConditionVector, CONDITION_DIM};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cvae,
    Cgan,
    Diffusion,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cvae, ModelKind::Cgan, ModelKind::Diffusion];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cvae => "cvae",
            ModelKind::Cgan => "cgan",
            ModelKind::Diffusion => "diffusion",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cvae" => Ok(ModelKind::Cvae),
            "cgan" => Ok(ModelKind::Cgan),
            "diffusion" | "ddpm" => Ok(ModelKind::Diffusion),
            _ => Err(Error::Config(format!("unknown model kind {s:?} (expected cvae, cgan or diffusion)"))),
        }
    }
}

/// A trained conditional generator of normalized energy images.
pub trait Generator {
    fn kind(&self) -> ModelKind;

    /// One `H x W` grid per (condition, seed) pair, values in [-1, 1].
    ///
    /// The grid for a pair depends only on that pair, never on batch
    /// composition.
    fn generate(&self, conditions: &[ConditionVector], seeds: &[u64]) -> Result<Array3<f32>>;
}

pub(crate) fn check_pairs(conditions: &[ConditionVector], seeds: &[u64]) -> Result<()> {
    if conditions.len() != seeds.len() {
        return Err(Error::Contract(format!("{} conditions for {} seeds", conditions.len(), seeds.len())));
    }
    Ok(())
}

/// `[B, H, W]` grids to a `[B, 1, H, W]` tensor.
pub fn images_to_tensor<T: Real>(images: ArrayView3<f32>) -> Tensor<T> {
    let (b, h, w) = images.dim();
    let data = images.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Tensor::from_vec(&[b, 1, h, w], data).expect("image tensor shape")
}

/// `[B, 1, H, W]` tensor back to `[B, H, W]` grids.
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Array3<f32> {
    let s = t.shape();
    assert!(s.len() == 4 && s[1] == 1, "expected [B, 1, H, W], got {s:?}");
    let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
    Array3::from_shape_vec((s[0], s[2], s[3]), data).expect("image shape")
}

pub fn conditions_to_tensor<T: Real>(conditions: &[ConditionVector]) -> Tensor<T> {
    let data = conditions
        .iter()
        .flat_map(|c| c.values.iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    Tensor::from_vec(&[conditions.len(), CONDITION_DIM], data).expect("condition tensor shape")
}

/// Smallest multiple of `factor` that is at least `n`.
pub fn round_up(n: usize, factor: usize) -> usize {
    n.div_ceil(factor) * factor
}

/// Splits `0..n` into consecutive chunks of at most `size`.
pub(crate) fn chunks(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size.max(1)).map(move |a| a..(a + size.max(1)).min(n))
}
