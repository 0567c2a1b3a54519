//! Conditional VAE and conditional GAN baselines.

mod cgan;
mod cvae;

pub use cgan::{bce, Cgan, CganConfig, DISCRIMINATOR_PREFIX, GENERATOR_PREFIX};
pub use cvae::{cvae_loss, Cvae, CvaeConfig, CvaeLoss, LatentCode};

use meterdiff_nn::{Graph, Real, Var};

/// Edge-pads `[B, 1, H, W]` to `ph x pw` and appends the condition as
/// constant channels.
pub(crate) fn with_condition_channels<T: Real>(g: &mut Graph<T>, x: Var, cond: Var, ph: usize, pw: usize) -> Var {
    let s = g.shape(x).to_vec();
    let padded = g.pad_edge(x, 0, ph - s[2], 0, pw - s[3]);
    let planes = g.broadcast2d(cond, ph, pw);
    g.concat(padded, planes)
}
