use std::fmt;

use meterdiff_nn::{Activation, Graph, ParamStore, Tensor};
use ndarray::{Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{chunks, images_to_tensor};

pub const DEFAULT_FEATURE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    SeededRandomConv,
    /// A caller-supplied embedding, identified by name.
    ExternalPretrained(String),
}

type ExternalFn = dyn Fn(ArrayView3<f32>) -> Result<Array2<f64>> + Send + Sync;

/// Maps `N x H x W` images to `N x output_dim` feature vectors.
///
/// The default is an untrained convolution stack with weights fixed by the
/// seed, followed by global average pooling. FID values are only comparable
/// between runs that use the same extractor.
pub struct FeatureExtractor {
    kind: ExtractorKind,
    seed: u64,
    output_dim: usize,
    params: ParamStore<f32>,
    external: Option<Box<ExternalFn>>,
}

impl fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("kind", &self.kind)
            .field("seed", &self.seed)
            .field("output_dim", &self.output_dim)
            .finish()
    }
}

const CHANNELS: [usize; 4] = [1, 16, 32, 64];
const CHUNK: usize = 32;

impl FeatureExtractor {
    pub fn seeded_random_conv(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, pair) in CHANNELS.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let fan_in = cin * 9;
            // He-style scaling keeps activations from shrinking layer to layer.
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let w: Vec<f32> = (0..cout * fan_in).map(|_| normal.sample(&mut rng) as f32).collect();
            params.insert(format!("conv{i}.weight"), Tensor::from_vec(&[cout, cin, 3, 3], w).expect("shape"));
            let b: Vec<f32> = (0..cout).map(|_| (normal.sample(&mut rng) * 0.1) as f32).collect();
            params.insert(format!("conv{i}.bias"), Tensor::from_vec(&[cout], b).expect("shape"));
        }
        Self {
            kind: ExtractorKind::SeededRandomConv,
            seed,
            output_dim: DEFAULT_FEATURE_DIM,
            params,
            external: None,
        }
    }

    /// Wraps an external embedding such as a pretrained image network.
    pub fn external(name: impl Into<String>, output_dim: usize, f: Box<ExternalFn>) -> Self {
        Self {
            kind: ExtractorKind::ExternalPretrained(name.into()),
            seed: 0,
            output_dim,
            params: ParamStore::new(),
            external: Some(f),
        }
    }

    pub fn kind(&self) -> &ExtractorKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn extract(&self, images: ArrayView3<f32>) -> Result<Array2<f64>> {
        let n = images.dim().0;
        if let Some(f) = &self.external {
            let out = f(images)?;
            if out.dim() != (n, self.output_dim) {
                return Err(Error::Contract(format!(
                    "external extractor returned {:?}, expected ({n}, {})",
                    out.dim(),
                    self.output_dim
                )));
            }
            return Ok(out);
        }
        let mut out = Array2::zeros((n, self.output_dim));
        for r in chunks(n, CHUNK) {
            let mut g = Graph::new();
            let mut h = g.constant(images_to_tensor(images.slice(ndarray::s![r.clone(), .., ..])));
            for i in 0..CHANNELS.len() - 1 {
                let w = g.constant(self.params.get(&format!("conv{i}.weight")).expect("weight").clone());
                let b = g.constant(self.params.get(&format!("conv{i}.bias")).expect("bias").clone());
                let c = g.conv2d(h, w, Some(b), 2, 1);
                h = g.activation(c, Activation::Relu);
            }
            let pooled = g.mean_spatial(h);
            let v = g.value(pooled);
            for (k, i) in r.enumerate() {
                for (j, x) in v.outer(k).iter().enumerate() {
                    out[[i, j]] = *x as f64;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn features_are_deterministic_with_nonzero_variance() {
        let ex = FeatureExtractor::seeded_random_conv(7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let images = Array3::from_shape_simple_fn((5, 52, 168), || rng.random_range(-1.0f32..1.0));
        let a = ex.extract(images.view()).unwrap();
        let b = FeatureExtractor::seeded_random_conv(7).extract(images.view()).unwrap();
        assert_eq!(a.dim(), (5, 64));
        assert_eq!(a, b);
        let var = a.var_axis(ndarray::Axis(0), 1.0);
        assert!(var.iter().filter(|v| **v > 0.0).count() > 32);
        let other = FeatureExtractor::seeded_random_conv(8).extract(images.view()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn external_extractor_is_checked() {
        let ex = FeatureExtractor::external("mean", 1, Box::new(|x| Ok(Array2::from_elem((x.dim().0, 2), 0.0))));
        assert!(ex.extract(Array3::zeros((2, 3, 3)).view()).is_err());
    }
}
