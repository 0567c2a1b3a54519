//! Parameterised building blocks. Each layer only remembers the names of its
//! tensors; the values live in a [`ParamStore`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng));
        store.insert(&bias, fan_in_uniform(&[out_channels], fan_in, rng));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &self.weight);
        let b = g.param(store, &self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Transposed convolution that doubles (stride 2) the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: String,
    bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel / (stride * stride).max(1);
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, fan_in_uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng));
        store.insert(&bias, fan_in_uniform(&[out_channels], fan_in, rng));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Upsamples `x: [B, Cin, h, w]` to `[B, Cout, h*stride, w*stride]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (oh, ow) = (shape[2] * self.stride, shape[3] * self.stride);
        let w = g.param(store, &self.weight);
        let b = g.param(store, &self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.padding, oh, ow)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, fan_in_uniform(&[out_features, in_features], in_features, rng));
        store.insert(&bias, fan_in_uniform(&[out_features], in_features, rng));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &self.weight);
        let b = g.param(store, &self.bias);
        g.linear(x, w, Some(b))
    }
}
