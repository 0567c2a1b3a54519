//! DDPM mathematics: the noise schedule, forward corruption, training pairs
//! and the ancestral reverse sampler. Nothing here knows about networks; the
//! sampler talks to any [`Denoiser`].

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ConditionVector;
use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_BETA1: f64 = 1e-4;
pub const DEFAULT_BETA2: f64 = 0.02;

/// Linear beta schedule with derived alpha and cumulative-product tables.
///
/// Steps are 1-based; `alpha_bar(0)` is defined as 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_noise_schedule(steps: usize, beta1: f64, beta2: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
    }
    if !(beta1 > 0.0 && beta1 < beta2 && beta2 < 1.0) {
        return Err(Error::Config(format!("need 0 < beta1 < beta2 < 1, got {beta1} and {beta2}")));
    }
    let step = (beta2 - beta1) / (steps - 1) as f64;
    let betas: Vec<f64> = (0..steps).map(|i| beta1 + i as f64 * step).collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_noise_schedule(DEFAULT_STEPS, DEFAULT_BETA1, DEFAULT_BETA2).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`, zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: shape {b:?} does not match {a:?}")));
    }
    Ok(())
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(x0: &ArrayView2<f32>, t: usize, eps: &ArrayView2<f32>, sched: &NoiseSchedule) -> Result<Array2<f32>> {
    sched.check(t)?;
    same_shape(x0.shape(), eps.shape(), "forward_diffuse noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| (a * x as f64 + b * e as f64) as f32))
}

/// A noised training example for epsilon prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSample {
    pub x_t: Array2<f32>,
    pub t: usize,
    pub epsilon: Array2<f32>,
    pub condition: ConditionVector,
}

pub fn standard_normal_grid(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)`; the regression target is `eps`.
pub fn make_training_pair(
    x0: &ArrayView2<f32>,
    condition: ConditionVector,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> (DiffusionSample, Array2<f32>) {
    let t = rng.random_range(1..=sched.steps());
    let epsilon = standard_normal_grid(x0.dim(), rng);
    let x_t = forward_diffuse(x0, t, &epsilon.view(), sched).expect("t drawn in range, shapes equal");
    let target = epsilon.clone();
    (
        DiffusionSample {
            x_t,
            t,
            epsilon,
            condition,
        },
        target,
    )
}

/// `(x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)` without clipping.
pub fn predict_x0_unclipped(x_t: &ArrayView2<f32>, t: usize, eps_hat: &ArrayView2<f32>, sched: &NoiseSchedule) -> Result<Array2<f32>> {
    sched.check(t)?;
    same_shape(x_t.shape(), eps_hat.shape(), "predict_x0 eps_hat")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x_t).and(eps_hat).map_collect(|&x, &e| ((x as f64 - b * e as f64) / a) as f32))
}

/// Predicted clean grid, clipped to [-1, 1].
pub fn predict_x0(x_t: &ArrayView2<f32>, t: usize, eps_hat: &ArrayView2<f32>, sched: &NoiseSchedule) -> Result<Array2<f32>> {
    Ok(predict_x0_unclipped(x_t, t, eps_hat, sched)?.mapv_into(|v| v.clamp(-1.0, 1.0)))
}

/// One ancestral step `x_t -> x_{t-1}` through the clipped-x0 posterior.
///
/// `z` is the step's unit Gaussian draw; at `t = 1` the variance is zero so
/// `z` has no effect.
pub fn reverse_step(
    x_t: &ArrayView2<f32>,
    t: usize,
    eps_hat: &ArrayView2<f32>,
    z: &ArrayView2<f32>,
    sched: &NoiseSchedule,
) -> Result<Array2<f32>> {
    same_shape(x_t.shape(), z.shape(), "reverse_step noise")?;
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let (c0, ct, sigma) = posterior_coefficients(sched, t);
    Ok(Zip::from(&x0)
        .and(x_t)
        .and(z)
        .map_collect(|&x0, &xt, &z| (c0 * x0 as f64 + ct * xt as f64 + sigma * z as f64) as f32))
}

/// Coefficients of the posterior mean on `x0` and `x_t`, and the posterior std.
fn posterior_coefficients(sched: &NoiseSchedule, t: usize) -> (f64, f64, f64) {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    (c0, ct, sched.posterior_variance(t).sqrt())
}

/// Anything that predicts the noise in a batch of `B x H x W` grids.
pub trait Denoiser {
    fn predict_noise(&self, x_t: ArrayView3<f32>, t: &[usize], conditions: &[ConditionVector]) -> Result<Array3<f32>>;
}

/// Draws one grid of the given shape from the reverse process.
pub fn sample(
    denoiser: &dyn Denoiser,
    condition: ConditionVector,
    shape: (usize, usize),
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f32>> {
    let batch = sample_batch(denoiser, &[condition], shape, sched, &[seed])?;
    Ok(batch.index_axis_move(Axis(0), 0))
}

/// Runs independent reverse chains side by side, one per (condition, seed).
///
/// Each chain owns a random stream seeded from its own seed, so the result
/// for a chain does not depend on what else shares its batch.
pub fn sample_batch(
    denoiser: &dyn Denoiser,
    conditions: &[ConditionVector],
    shape: (usize, usize),
    sched: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Array3<f32>> {
    if conditions.len() != seeds.len() {
        return Err(Error::Contract(format!("{} conditions for {} seeds", conditions.len(), seeds.len())));
    }
    let b = seeds.len();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x = Array3::<f32>::zeros((b, shape.0, shape.1));
    for (mut grid, rng) in x.outer_iter_mut().zip(&mut rngs) {
        grid.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    let mut ts = vec![0; b];
    for t in (1..=sched.steps()).rev() {
        ts.iter_mut().for_each(|v| *v = t);
        let eps = denoiser.predict_noise(x.view(), &ts, conditions)?;
        if eps.shape() != x.shape() {
            return Err(Error::Contract(format!(
                "denoiser returned shape {:?} for input {:?}",
                eps.shape(),
                x.shape()
            )));
        }
        let ab = sched.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (c0, ct, sigma) = posterior_coefficients(sched, t);
        for ((mut grid, e), rng) in x.outer_iter_mut().zip(eps.outer_iter()).zip(&mut rngs) {
            Zip::from(&mut grid).and(&e).for_each(|xv, &ev| {
                let xt = *xv as f64;
                let x0 = ((xt - s * ev as f64) / a).clamp(-1.0, 1.0);
                let z: f64 = if t > 1 { rng.sample::<f32, _>(StandardNormal) as f64 } else { 0.0 };
                *xv = (c0 * x0 + ct * xt + sigma * z) as f32;
            });
        }
    }
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(x)
}
