use meterdiff_nn::{Activation, Conv2d, ConvTranspose2d, Graph, Linear, ParamStore, Real, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::with_condition_channels;
use crate::data::{ConditionVector, CONDITION_DIM, HOURS_PER_WEEK, WEEKS};
use crate::error::{Error, Result};
use crate::models::{check_pairs, chunks, conditions_to_tensor, images_to_tensor, round_up, tensor_to_images, Generator, ModelKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub encoder_filters: Vec<usize>,
    pub kernel: usize,
    pub dense_dim: usize,
    pub latent_dim: usize,
    pub decoder_filters: Vec<usize>,
    pub kl_weight: f64,
    pub input_shape: (usize, usize),
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            encoder_filters: vec![16, 32, 64],
            kernel: 3,
            dense_dim: 64,
            latent_dim: 512,
            decoder_filters: vec![64, 32, 16],
            kl_weight: 1.0,
            input_shape: (WEEKS, HOURS_PER_WEEK),
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let reversed: Vec<usize> = self.encoder_filters.iter().rev().copied().collect();
        if self.encoder_filters.is_empty() || self.decoder_filters != reversed {
            return Err(Error::Config(format!(
                "decoder filters {:?} must reverse encoder filters {:?}",
                self.decoder_filters, self.encoder_filters
            )));
        }
        if self.encoder_filters.contains(&0) || self.dense_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("CVAE widths must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.kl_weight.is_nan() || self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        let f = 1 << self.encoder_filters.len();
        (round_up(self.input_shape.0, f), round_up(self.input_shape.1, f))
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        let (ph, pw) = self.padded_shape();
        let f = 1 << self.encoder_filters.len();
        (*self.encoder_filters.last().expect("validated"), ph / f, pw / f)
    }
}

/// Posterior parameters and the reparameterized draw `z = mu + exp(log_var / 2) * eta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
    pub z: Vec<f32>,
    pub eta: Vec<f32>,
}

/// Loss nodes of one CVAE training batch.
#[derive(Clone, Copy, Debug)]
pub struct CvaeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// `(recon + kl_weight * kl, recon, kl)` with `recon` the mean squared error
/// and `kl = -0.5 * mean(1 + log_var - mu^2 - exp(log_var))`.
pub fn cvae_loss(x: &[f32], x_recon: &[f32], mu: &[f32], log_var: &[f32], kl_weight: f64) -> (f64, f64, f64) {
    assert_eq!(x.len(), x_recon.len(), "reconstruction shape mismatch");
    assert_eq!(mu.len(), log_var.len(), "latent shape mismatch");
    let recon = x.iter().zip(x_recon).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / x.len() as f64;
    let kl = -0.5
        * mu.iter()
            .zip(log_var)
            .map(|(&m, &lv)| 1.0 + lv as f64 - (m as f64).powi(2) - (lv as f64).exp())
            .sum::<f64>()
        / mu.len() as f64;
    (recon + kl_weight * kl, recon, kl)
}

pub struct Cvae<T: Real = f32> {
    config: CvaeConfig,
    params: ParamStore<T>,
    seed: u64,
    enc_convs: Vec<Conv2d>,
    enc_dense: Linear,
    mu: Linear,
    log_var: Linear,
    dec_dense: Linear,
    dec_convs: Vec<ConvTranspose2d>,
    out: Conv2d,
}

impl<T: Real> Cvae<T> {
    pub fn new(config: CvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = config.kernel;
        let mut cin = 1 + CONDITION_DIM;
        let mut enc_convs = Vec::new();
        for (i, &f) in config.encoder_filters.iter().enumerate() {
            enc_convs.push(Conv2d::new(&mut p, &format!("encoder.conv{i}"), cin, f, k, 2, k / 2, &mut rng));
            cin = f;
        }
        let (bc, bh, bw) = config.bottleneck();
        let flat = bc * bh * bw;
        let enc_dense = Linear::new(&mut p, "encoder.dense", flat, config.dense_dim, &mut rng);
        let mu = Linear::new(&mut p, "encoder.mu", config.dense_dim, config.latent_dim, &mut rng);
        let log_var = Linear::new(&mut p, "encoder.log_var", config.dense_dim, config.latent_dim, &mut rng);
        let dec_dense = Linear::new(&mut p, "decoder.dense", config.latent_dim + CONDITION_DIM, flat, &mut rng);
        let mut dec_convs = Vec::new();
        let mut cin = bc;
        for (i, &f) in config.decoder_filters.iter().enumerate() {
            dec_convs.push(ConvTranspose2d::new(&mut p, &format!("decoder.upsample{i}"), cin, f, k, 2, k / 2, &mut rng));
            cin = f;
        }
        let out = Conv2d::new(&mut p, "decoder.out", cin, 1, k, 1, k / 2, &mut rng);
        Ok(Self {
            config,
            params: p,
            seed,
            enc_convs,
            enc_dense,
            mu,
            log_var,
            dec_dense,
            dec_convs,
            out,
        })
    }

    pub fn from_params(config: CvaeConfig, params: &ParamStore<T>, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &CvaeConfig {
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

    fn check_images(&self, shape: &[usize], conds: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_shape;
        if shape.len() != 4 || shape[1..] != [1, h, w] || conds != [shape[0], CONDITION_DIM] {
            return Err(Error::Contract(format!(
                "CVAE expects [B, 1, {h}, {w}] images with [B, {CONDITION_DIM}] conditions, got {shape:?} and {conds:?}"
            )));
        }
        Ok(())
    }

    /// `(mu, log_var)` for `x: [B, 1, H, W]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Result<(Var, Var)> {
        self.check_images(g.shape(x), g.shape(cond))?;
        let p = &self.params;
        let (ph, pw) = self.config.padded_shape();
        let mut h = with_condition_channels(g, x, cond, ph, pw);
        for conv in &self.enc_convs {
            let c = conv.forward(g, p, h);
            h = g.activation(c, Activation::Relu);
        }
        let b = g.shape(h)[0];
        let flat_len: usize = g.shape(h)[1..].iter().product();
        let flat = g.reshape(h, &[b, flat_len]);
        let d = self.enc_dense.forward(g, p, flat);
        let d = g.activation(d, Activation::Relu);
        Ok((self.mu.forward(g, p, d), self.log_var.forward(g, p, d)))
    }

    /// Decodes `z: [B, latent]` to `[B, 1, H, W]` in [-1, 1].
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, cond: Var) -> Result<Var> {
        let (zs, cs) = (g.shape(z).to_vec(), g.shape(cond).to_vec());
        if zs.len() != 2 || zs[1] != self.config.latent_dim || cs != [zs[0], CONDITION_DIM] {
            return Err(Error::Contract(format!(
                "CVAE decoder expects [B, {}] latents with [B, {CONDITION_DIM}] conditions, got {zs:?} and {cs:?}",
                self.config.latent_dim
            )));
        }
        let p = &self.params;
        let (bc, bh, bw) = self.config.bottleneck();
        let zc = g.concat(z, cond);
        let d = self.dec_dense.forward(g, p, zc);
        let d = g.activation(d, Activation::Relu);
        let mut h = g.reshape(d, &[zs[0], bc, bh, bw]);
        for up in &self.dec_convs {
            let u = up.forward(g, p, h);
            h = g.activation(u, Activation::Relu);
        }
        let o = self.out.forward(g, p, h);
        let o = g.activation(o, Activation::Tanh);
        let (h, w) = self.config.input_shape;
        Ok(g.crop(o, 0, 0, h, w))
    }

    /// Records reconstruction, KL and weighted total for one batch.
    pub fn loss_graph(&self, g: &mut Graph<T>, x: Tensor<T>, cond: Tensor<T>, eta: Tensor<T>) -> Result<CvaeLoss> {
        let x = g.constant(x);
        let c = g.constant(cond);
        let (mu, log_var) = self.encode_graph(g, x, c)?;
        if g.shape(mu) != eta.shape() {
            return Err(Error::Contract(format!("noise shape {:?} does not match latent {:?}", eta.shape(), g.shape(mu))));
        }
        let eta = g.constant(eta);
        let z = g.reparameterize(mu, log_var, eta);
        let recon_x = self.decode_graph(g, z, c)?;
        let recon = g.mse(recon_x, x);
        let kl = g.gaussian_kl(mu, log_var);
        let total = g.add_scaled(recon, kl, T::one(), T::from_f64_lossy(self.config.kl_weight));
        Ok(CvaeLoss { total, recon, kl })
    }
}

impl Cvae<f32> {
    /// Encodes a batch with explicit reparameterization noise `eta: [B, latent]`.
    pub fn encode(&self, x: ArrayView3<f32>, conditions: &[ConditionVector], eta: ArrayView2<f32>) -> Result<Vec<LatentCode>> {
        if eta.dim() != (x.dim().0, self.config.latent_dim) {
            return Err(Error::Contract(format!("noise shape {:?} does not match the batch", eta.dim())));
        }
        let mut g = Graph::new();
        let xv = g.constant(images_to_tensor(x));
        let c = g.constant(conditions_to_tensor(conditions));
        let (mu, lv) = self.encode_graph(&mut g, xv, c)?;
        let e = g.constant(Tensor::from_vec(&[eta.nrows(), eta.ncols()], eta.iter().copied().collect())?);
        let z = g.reparameterize(mu, lv, e);
        let l = self.config.latent_dim;
        Ok((0..x.dim().0)
            .map(|i| LatentCode {
                mu: g.value(mu).outer(i).to_vec(),
                log_var: g.value(lv).outer(i).to_vec(),
                z: g.value(z).outer(i).to_vec(),
                eta: eta.row(i).to_vec(),
            })
            .inspect(|c| debug_assert_eq!(c.z.len(), l))
            .collect())
    }

    /// Encodes with noise drawn from `rng`.
    pub fn encode_with_rng(&self, x: ArrayView3<f32>, conditions: &[ConditionVector], rng: &mut impl Rng) -> Result<Vec<LatentCode>> {
        let eta = Array2::from_shape_simple_fn((x.dim().0, self.config.latent_dim), || rng.sample(StandardNormal));
        self.encode(x, conditions, eta.view())
    }

    pub fn decode(&self, z: ArrayView2<f32>, conditions: &[ConditionVector]) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::from_vec(&[z.nrows(), z.ncols()], z.iter().copied().collect())?);
        let c = g.constant(conditions_to_tensor(conditions));
        let out = self.decode_graph(&mut g, zv, c)?;
        Ok(tensor_to_images(g.value(out)))
    }
}

const GENERATE_CHUNK: usize = 32;

impl Generator for Cvae<f32> {
    fn kind(&self) -> ModelKind {
        ModelKind::Cvae
    }

    /// Decodes prior draws `z ~ N(0, I)`, one stream per seed.
    fn generate(&self, conditions: &[ConditionVector], seeds: &[u64]) -> Result<Array3<f32>> {
        check_pairs(conditions, seeds)?;
        let (h, w) = self.config.input_shape;
        let mut out = Array3::zeros((seeds.len(), h, w));
        for r in chunks(seeds.len(), GENERATE_CHUNK) {
            let mut z = Array2::<f32>::zeros((r.len(), self.config.latent_dim));
            for (mut row, &seed) in z.outer_iter_mut().zip(&seeds[r.clone()]) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            }
            let part = self.decode(z.view(), &conditions[r.clone()])?;
            out.slice_mut(ndarray::s![r, .., ..]).assign(&part);
        }
        Ok(out)
    }
}
