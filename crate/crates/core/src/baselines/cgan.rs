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

pub const GENERATOR_PREFIX: &str = "gen.";
pub const DISCRIMINATOR_PREFIX: &str = "disc.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CganConfig {
    pub disc_filters: Vec<usize>,
    pub gen_filters: Vec<usize>,
    pub noise_dim: usize,
    pub learning_rate: f64,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub input_shape: (usize, usize),
}

impl Default for CganConfig {
    fn default() -> Self {
        Self {
            disc_filters: vec![32, 64, 128],
            gen_filters: vec![128, 64, 32],
            noise_dim: 100,
            learning_rate: 1e-4,
            kernel: 3,
            leaky_slope: 0.2,
            input_shape: (WEEKS, HOURS_PER_WEEK),
        }
    }
}

impl CganConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(Error::Config("noise_dim must be at least 1".into()));
        }
        if self.disc_filters.is_empty() || self.gen_filters.is_empty() || self.disc_filters.contains(&0) || self.gen_filters.contains(&0) {
            return Err(Error::Config("CGAN filter lists must be non-empty and positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn disc_padded(&self) -> (usize, usize) {
        let f = 1 << self.disc_filters.len();
        (round_up(self.input_shape.0, f), round_up(self.input_shape.1, f))
    }

    fn gen_padded(&self) -> (usize, usize) {
        let f = 1 << self.gen_filters.len();
        (round_up(self.input_shape.0, f), round_up(self.input_shape.1, f))
    }
}

/// Mean binary cross-entropy of probabilities against one label.
pub fn bce(probabilities: &[f64], label: f64) -> f64 {
    let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
    -probabilities
        .iter()
        .map(|&p| label * clamp(p).ln() + (1.0 - label) * (1.0 - clamp(p)).ln())
        .sum::<f64>()
        / probabilities.len() as f64
}

/// Generator and discriminator sharing one parameter store, told apart by
/// the `gen.` and `disc.` name prefixes.
pub struct Cgan<T: Real = f32> {
    config: CganConfig,
    params: ParamStore<T>,
    seed: u64,
    gen_dense: Linear,
    gen_ups: Vec<ConvTranspose2d>,
    gen_out: Conv2d,
    disc_convs: Vec<Conv2d>,
    disc_out: Linear,
}

impl<T: Real> Cgan<T> {
    pub fn new(config: CganConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = config.kernel;

        let (gh, gw) = config.gen_padded();
        let f = 1 << config.gen_filters.len();
        let base = config.gen_filters[0];
        let gen_dense = Linear::new(&mut p, "gen.dense", config.noise_dim + CONDITION_DIM, base * (gh / f) * (gw / f), &mut rng);
        let mut cin = base;
        let mut gen_ups = Vec::new();
        for (i, &c) in config.gen_filters.iter().enumerate() {
            gen_ups.push(ConvTranspose2d::new(&mut p, &format!("gen.upsample{i}"), cin, c, k, 2, k / 2, &mut rng));
            cin = c;
        }
        let gen_out = Conv2d::new(&mut p, "gen.out", cin, 1, k, 1, k / 2, &mut rng);

        let (dh, dw) = config.disc_padded();
        let f = 1 << config.disc_filters.len();
        let mut cin = 1 + CONDITION_DIM;
        let mut disc_convs = Vec::new();
        for (i, &c) in config.disc_filters.iter().enumerate() {
            disc_convs.push(Conv2d::new(&mut p, &format!("disc.conv{i}"), cin, c, k, 2, k / 2, &mut rng));
            cin = c;
        }
        let disc_out = Linear::new(&mut p, "disc.logit", cin * (dh / f) * (dw / f), 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            seed,
            gen_dense,
            gen_ups,
            gen_out,
            disc_convs,
            disc_out,
        })
    }

    pub fn from_params(config: CganConfig, params: &ParamStore<T>, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &CganConfig {
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

    /// Maps `noise: [B, noise_dim]` to `[B, 1, H, W]` in [-1, 1].
    pub fn generate_graph(&self, g: &mut Graph<T>, noise: Var, cond: Var) -> Result<Var> {
        let (ns, cs) = (g.shape(noise).to_vec(), g.shape(cond).to_vec());
        if ns.len() != 2 || ns[1] != self.config.noise_dim || cs != [ns[0], CONDITION_DIM] {
            return Err(Error::Contract(format!(
                "generator expects [B, {}] noise with [B, {CONDITION_DIM}] conditions, got {ns:?} and {cs:?}",
                self.config.noise_dim
            )));
        }
        let p = &self.params;
        let leaky = Activation::LeakyRelu(self.config.leaky_slope);
        let (gh, gw) = self.config.gen_padded();
        let f = 1 << self.config.gen_filters.len();
        let nc = g.concat(noise, cond);
        let d = self.gen_dense.forward(g, p, nc);
        let d = g.activation(d, leaky);
        let mut h = g.reshape(d, &[ns[0], self.config.gen_filters[0], gh / f, gw / f]);
        for up in &self.gen_ups {
            let u = up.forward(g, p, h);
            h = g.activation(u, leaky);
        }
        let o = self.gen_out.forward(g, p, h);
        let o = g.activation(o, Activation::Tanh);
        let (h, w) = self.config.input_shape;
        Ok(g.crop(o, 0, 0, h, w))
    }

    /// Real-versus-fake logits `[B, 1]` for `x: [B, 1, H, W]`.
    pub fn discriminate_graph(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Result<Var> {
        let (xs, cs) = (g.shape(x).to_vec(), g.shape(cond).to_vec());
        let (h, w) = self.config.input_shape;
        if xs.len() != 4 || xs[1..] != [1, h, w] || cs != [xs[0], CONDITION_DIM] {
            return Err(Error::Contract(format!(
                "discriminator expects [B, 1, {h}, {w}] with [B, {CONDITION_DIM}] conditions, got {xs:?} and {cs:?}"
            )));
        }
        let p = &self.params;
        let leaky = Activation::LeakyRelu(self.config.leaky_slope);
        let (dh, dw) = self.config.disc_padded();
        let mut hidden = with_condition_channels(g, x, cond, dh, dw);
        for conv in &self.disc_convs {
            let c = conv.forward(g, p, hidden);
            hidden = g.activation(c, leaky);
        }
        let flat_len: usize = g.shape(hidden)[1..].iter().product();
        let flat = g.reshape(hidden, &[xs[0], flat_len]);
        Ok(self.disc_out.forward(g, p, flat))
    }

    /// Keeps only the gradients whose parameter name starts with `prefix`.
    pub fn select_grads(&self, grads: Vec<Option<Tensor<T>>>, prefix: &str) -> Vec<Option<Tensor<T>>> {
        self.params
            .names()
            .zip(grads)
            .map(|(n, gr)| if n.starts_with(prefix) { gr } else { None })
            .collect()
    }
}

impl Cgan<f32> {
    pub fn generate_from_noise(&self, noise: ArrayView2<f32>, conditions: &[ConditionVector]) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let n = g.constant(Tensor::from_vec(&[noise.nrows(), noise.ncols()], noise.iter().copied().collect())?);
        let c = g.constant(conditions_to_tensor(conditions));
        let out = self.generate_graph(&mut g, n, c)?;
        Ok(tensor_to_images(g.value(out)))
    }

    /// Probability that each grid is real, strictly inside (0, 1).
    pub fn discriminate(&self, x: ArrayView3<f32>, conditions: &[ConditionVector]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(images_to_tensor(x));
        let c = g.constant(conditions_to_tensor(conditions));
        let logits = self.discriminate_graph(&mut g, xv, c)?;
        Ok(g.value(logits).data().iter().map(|&z| logistic(z as f64)).collect())
    }

    pub fn noise_for_seed(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.config.noise_dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Logistic function kept strictly inside (0, 1) for finite logits.
fn logistic(z: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

const GENERATE_CHUNK: usize = 16;

impl Generator for Cgan<f32> {
    fn kind(&self) -> ModelKind {
        ModelKind::Cgan
    }

    fn generate(&self, conditions: &[ConditionVector], seeds: &[u64]) -> Result<Array3<f32>> {
        check_pairs(conditions, seeds)?;
        let (h, w) = self.config.input_shape;
        let mut out = Array3::zeros((seeds.len(), h, w));
        for r in chunks(seeds.len(), GENERATE_CHUNK) {
            let mut noise = Array2::<f32>::zeros((r.len(), self.config.noise_dim));
            for (mut row, &seed) in noise.outer_iter_mut().zip(&seeds[r.clone()]) {
                row.assign(&ndarray::ArrayView1::from(&self.noise_for_seed(seed)[..]));
            }
            let part = self.generate_from_noise(noise.view(), &conditions[r.clone()])?;
            out.slice_mut(ndarray::s![r, .., ..]).assign(&part);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_conditions, BuildingType, GeoBounds, MeterMetadata, MeterType};

    fn cond() -> ConditionVector {
        let m = MeterMetadata {
            meter_id: "m".into(),
            building_id: "b".into(),
            meter_type: MeterType::ChilledWater,
            building_type: BuildingType::PublicServices,
            latitude: 45.0,
            longitude: -85.0,
        };
        let b = GeoBounds {
            lat_min: 30.0,
            lat_max: 50.0,
            lon_min: -90.0,
            lon_max: -70.0,
        };
        encode_conditions(&m, 2017, &b).unwrap()
    }

    #[test]
    fn generator_is_deterministic_bounded_and_noise_driven() {
        let m = Cgan::<f32>::new(CganConfig::default(), 1).unwrap();
        let a = m.generate(&[cond()], &[10]).unwrap();
        assert_eq!(a, m.generate(&[cond()], &[10]).unwrap());
        assert_eq!(a.dim(), (1, 52, 168));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = m.generate(&[cond()], &[11]).unwrap();
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let m = Cgan::<f32>::new(CganConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_simple_fn((3, 52, 168), || rng.random_range(-1.0f32..1.0));
        let p = m.discriminate(x.view(), &[cond(); 3]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(m.discriminate(x.view(), &[cond(); 2]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert!((bce(&[0.5], 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(&[0.5, 0.5], 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(&[1.0 - 1e-12], 1.0) < 1e-9);
        assert!(bce(&[1e-12], 0.0) < 1e-9);
    }

    #[test]
    fn parameters_split_by_prefix() {
        let m = Cgan::<f32>::new(CganConfig::default(), 0).unwrap();
        assert!(m.params().names().all(|n| n.starts_with(GENERATOR_PREFIX) || n.starts_with(DISCRIMINATOR_PREFIX)));
        let all: Vec<Option<Tensor<f32>>> = m.params().iter().map(|(_, t)| Some(t.clone())).collect();
        let gen = m.select_grads(all, GENERATOR_PREFIX);
        for ((name, _), g) in m.params().iter().zip(&gen) {
            assert_eq!(g.is_some(), name.starts_with(GENERATOR_PREFIX));
        }
    }
}
