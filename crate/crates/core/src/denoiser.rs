//! Context-conditioned U-Net that predicts the noise in `x_t`.
//!
//! Encoder: a full-resolution conv, then `depth` stride-2 convs. Decoder:
//! per level a 2x2 transposed conv, FiLM modulation `h * (1 + scale(c)) +
//! shift(t)`, concatenation with the matching encoder map and a 3x3 conv.
//! Inputs are edge-padded to a multiple of `2^(depth + 1)` (52 rows become
//! 56) and the output is cropped back.

use meterdiff_nn::{Activation, Conv2d, ConvTranspose2d, Graph, Linear, ParamStore, Real, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConditionVector, CONDITION_DIM, HOURS_PER_WEEK, WEEKS};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{chunks, conditions_to_tensor, images_to_tensor, round_up, tensor_to_images};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channel width at the deepest level; shallower levels halve it.
    pub hidden_features: usize,
    pub context_dim: usize,
    pub time_embed_dim: usize,
    pub input_shape: (usize, usize),
    pub depth: usize,
    /// Number of diffusion steps `T`; time is embedded as `t / T`.
    pub diffusion_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden_features: 64,
            context_dim: CONDITION_DIM,
            time_embed_dim: 32,
            input_shape: (WEEKS, HOURS_PER_WEEK),
            depth: 2,
            diffusion_steps: diffusion::DEFAULT_STEPS,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_features == 0 {
            return bad("hidden_features must be at least 1".into());
        }
        if self.context_dim != CONDITION_DIM {
            return bad(format!("context_dim {} does not match the {CONDITION_DIM}-value condition layout", self.context_dim));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be even and at least 2, got {}", self.time_embed_dim));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 {
            return bad("input_shape must be non-empty".into());
        }
        if self.diffusion_steps < 2 {
            return bad("diffusion_steps must be at least 2".into());
        }
        Ok(())
    }

    /// Channel count at level `l` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        (self.hidden_features >> (self.depth - level)).max(1)
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        let f = 1 << (self.depth + 1);
        (round_up(self.input_shape.0, f), round_up(self.input_shape.1, f))
    }
}

/// Sinusoidal embedding of `t / T`: `[sin(w_k s), cos(w_k s)]` with
/// frequencies `w_k` spaced geometrically from 1 to `T`.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let s = t as f64 / steps as f64;
    let half = dim / 2;
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            (steps as f64).powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut out: Vec<f64> = (0..half).map(|k| (freq(k) * s).sin()).collect();
    out.extend((0..half).map(|k| (freq(k) * s).cos()));
    if dim % 2 == 1 {
        out.push(s);
    }
    out
}

struct Level {
    up: ConvTranspose2d,
    scale: Linear,
    shift: Linear,
    fuse: Conv2d,
}

pub struct UNet<T: Real = f32> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    seed: u64,
    inc: Conv2d,
    downs: Vec<Conv2d>,
    mid: Conv2d,
    ctx_embed: Linear,
    time_embed: Linear,
    // levels[l] upsamples from level l + 1 into level l.
    levels: Vec<Level>,
    out: Conv2d,
}

/// Fan-in scaled random initialization, deterministic in `seed`.
pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<UNet<f32>> {
    UNet::new(config.clone(), seed)
}

impl<T: Real> UNet<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let f = config.hidden_features;
        let w = |l| config.width(l);
        let inc = Conv2d::new(&mut p, "inc", 1, w(0), 3, 1, 1, &mut rng);
        let downs = (1..=config.depth)
            .map(|l| Conv2d::new(&mut p, &format!("down{l}"), w(l - 1), w(l), 3, 2, 1, &mut rng))
            .collect();
        let mid = Conv2d::new(&mut p, "mid", w(config.depth), w(config.depth), 3, 1, 1, &mut rng);
        let ctx_embed = Linear::new(&mut p, "context.embed", config.context_dim, f, &mut rng);
        let time_embed = Linear::new(&mut p, "time.embed", config.time_embed_dim, f, &mut rng);
        let levels = (0..config.depth)
            .map(|l| Level {
                up: ConvTranspose2d::new(&mut p, &format!("up{l}.upsample"), w(l + 1), w(l), 2, 2, 0, &mut rng),
                scale: Linear::new(&mut p, &format!("up{l}.context_scale"), f, w(l), &mut rng),
                shift: Linear::new(&mut p, &format!("up{l}.time_shift"), f, w(l), &mut rng),
                fuse: Conv2d::new(&mut p, &format!("up{l}.fuse"), 2 * w(l), w(l), 3, 1, 1, &mut rng),
            })
            .collect();
        let out = Conv2d::new(&mut p, "out", w(0), 1, 3, 1, 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            seed,
            inc,
            downs,
            mid,
            ctx_embed,
            time_embed,
            levels,
            out,
        })
    }

    /// Rebuilds the network around stored parameters.
    pub fn from_params(config: DenoiserConfig, params: &ParamStore<T>, seed: u64) -> Result<Self> {
        let mut net = Self::new(config, seed)?;
        net.params.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    fn time_tensor(&self, t: &[usize]) -> Tensor<T> {
        let d = self.config.time_embed_dim;
        let data = t
            .iter()
            .flat_map(|&t| time_embedding(t, self.config.diffusion_steps, d))
            .map(T::from_f64_lossy)
            .collect();
        Tensor::from_vec(&[t.len(), d], data).expect("time embedding shape")
    }

    fn check_inputs(&self, shape: &[usize], t: &[usize], cond: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_shape;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(Error::Contract(format!("denoiser expects [B, 1, {h}, {w}], got {shape:?}")));
        }
        if t.len() != shape[0] || cond != [shape[0], self.config.context_dim] {
            return Err(Error::Contract(format!(
                "batch of {} needs {} timesteps and [{0}, {}] conditions, got {} and {cond:?}",
                shape[0],
                shape[0],
                self.config.context_dim,
                t.len()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&t| t == 0 || t > self.config.diffusion_steps) {
            return Err(Error::StepOutOfRange {
                t: bad,
                steps: self.config.diffusion_steps,
            });
        }
        Ok(())
    }

    /// Records the forward pass for `x: [B, 1, H, W]`, `cond: [B, context_dim]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, t: &[usize], cond: Var) -> Result<Var> {
        self.check_inputs(g.shape(x), t, g.shape(cond))?;
        let p = &self.params;
        let silu = Activation::Silu;
        let (h, w) = self.config.input_shape;
        let (ph, pw) = self.config.padded_shape();

        let ctx = self.ctx_embed.forward(g, p, cond);
        let ctx = g.activation(ctx, silu);
        let temb = g.constant(self.time_tensor(t));
        let temb = self.time_embed.forward(g, p, temb);
        let temb = g.activation(temb, silu);

        let x = g.pad_edge(x, 0, ph - h, 0, pw - w);
        let mut skips = Vec::with_capacity(self.config.depth);
        let hidden = self.inc.forward(g, p, x);
        let mut hidden = g.activation(hidden, silu);
        for down in &self.downs {
            skips.push(hidden);
            let d = down.forward(g, p, hidden);
            hidden = g.activation(d, silu);
        }
        let m = self.mid.forward(g, p, hidden);
        hidden = g.activation(m, silu);
        for (level, skip) in self.levels.iter().zip(skips).rev() {
            let up = level.up.forward(g, p, hidden);
            let scale = level.scale.forward(g, p, ctx);
            let shift = level.shift.forward(g, p, temb);
            let up = g.film(up, scale, shift);
            let joined = g.concat(up, skip);
            let fused = level.fuse.forward(g, p, joined);
            hidden = g.activation(fused, silu);
        }
        let out = self.out.forward(g, p, hidden);
        Ok(g.crop(out, 0, 0, h, w))
    }

    /// Mean squared error between predicted and true noise for one batch.
    pub fn loss(&self, g: &mut Graph<T>, x_t: Tensor<T>, t: &[usize], cond: Tensor<T>, target: Tensor<T>) -> Result<Var> {
        let x = g.constant(x_t);
        let c = g.constant(cond);
        let eps_hat = self.forward(g, x, t, c)?;
        let target = g.constant(target);
        Ok(g.mse(eps_hat, target))
    }

    /// Predicted noise for a batch of grids.
    pub fn predict(&self, x_t: ArrayView3<f32>, t: &[usize], conditions: &[ConditionVector]) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(x_t));
        let c = g.constant(conditions_to_tensor(conditions));
        let out = self.forward(&mut g, x, t, c)?;
        Ok(tensor_to_images(g.value(out)))
    }

    /// Single-grid convenience wrapper around [`UNet::predict`].
    pub fn denoise(&self, x_t: &Array2<f32>, t: usize, c: &ConditionVector) -> Result<Array2<f32>> {
        let batch = x_t.view().insert_axis(ndarray::Axis(0));
        Ok(self.predict(batch, &[t], std::slice::from_ref(c))?.index_axis_move(ndarray::Axis(0), 0))
    }
}

/// Grids per network call while sampling; bounds tape memory.
const INFERENCE_CHUNK: usize = 8;

impl diffusion::Denoiser for UNet<f32> {
    fn predict_noise(&self, x_t: ArrayView3<f32>, t: &[usize], conditions: &[ConditionVector]) -> Result<Array3<f32>> {
        if x_t.dim().0 <= INFERENCE_CHUNK {
            return self.predict(x_t, t, conditions);
        }
        let mut out = Array3::zeros(x_t.dim());
        for r in chunks(x_t.dim().0, INFERENCE_CHUNK) {
            let part = self.predict(x_t.slice(ndarray::s![r.clone(), .., ..]), &t[r.clone()], &conditions[r.clone()])?;
            out.slice_mut(ndarray::s![r, .., ..]).assign(&part);
        }
        Ok(out)
    }
}

/// The trained denoiser paired with its schedule, ready to sample.
pub struct DiffusionModel {
    pub net: UNet<f32>,
    pub schedule: NoiseSchedule,
}

impl crate::models::Generator for DiffusionModel {
    fn kind(&self) -> crate::models::ModelKind {
        crate::models::ModelKind::Diffusion
    }

    fn generate(&self, conditions: &[ConditionVector], seeds: &[u64]) -> Result<Array3<f32>> {
        crate::models::check_pairs(conditions, seeds)?;
        diffusion::sample_batch(&self.net, conditions, self.net.config().input_shape, &self.schedule, seeds)
    }
}
