//! Training loops for the three model families and checkpoint storage.

use std::collections::BTreeMap;
use std::path::Path;

use meterdiff_nn::{Adam, Graph, ParamStore, Tensor};
use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{Cgan, CganConfig, Cvae, CvaeConfig};
use crate::data::{ConditionVector, GeoBounds, ProcessedDataset, Split, CONDITION_LAYOUT};
use crate::denoiser::{DenoiserConfig, DiffusionModel, UNet};
use crate::diffusion::{build_noise_schedule, make_training_pair, NoiseSchedule, DEFAULT_BETA1, DEFAULT_BETA2};
use crate::error::{Error, Result};
use crate::evaluation::{MetricSet, ProbeEvaluator};
use crate::models::{conditions_to_tensor, images_to_tensor, Generator, ModelKind};
use crate::seeds::derive_seed;
use crate::tensor_io::TensorBlob;

pub const CHECKPOINT_FORMAT: &str = "meterdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_PROBE_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Run the epoch hook every this many epochs; 0 disables it.
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn for_kind(model_kind: ModelKind) -> Self {
        let (epochs, learning_rate, batch_size) = match model_kind {
            ModelKind::Cvae => (100, 1e-3, 64),
            ModelKind::Cgan => (15_000, CganConfig::default().learning_rate, 64),
            ModelKind::Diffusion => (1000, 1e-3, 10),
        };
        Self { model_kind, epochs, learning_rate, batch_size, seed: 0, eval_every: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { denoiser: DenoiserConfig::default(), beta1: DEFAULT_BETA1, beta2: DEFAULT_BETA2 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_noise_schedule(self.denoiser.diffusion_steps, self.beta1, self.beta2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelConfig {
    Cvae(CvaeConfig),
    Cgan(CganConfig),
    Diffusion(DiffusionConfig),
}

impl ModelConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Cvae => ModelConfig::Cvae(CvaeConfig::default()),
            ModelKind::Cgan => ModelConfig::Cgan(CganConfig::default()),
            ModelKind::Diffusion => ModelConfig::Diffusion(DiffusionConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Cvae(_) => ModelKind::Cvae,
            ModelConfig::Cgan(_) => ModelKind::Cgan,
            ModelConfig::Diffusion(_) => ModelKind::Diffusion,
        }
    }

    fn input_shape(&self) -> (usize, usize) {
        match self {
            ModelConfig::Cvae(c) => c.input_shape,
            ModelConfig::Cgan(c) => c.input_shape,
            ModelConfig::Diffusion(c) => c.denoiser.input_shape,
        }
    }
}

/// A model of any family, ready to train or sample.
pub enum Model {
    Cvae(Cvae<f32>),
    Cgan(Cgan<f32>),
    Diffusion(DiffusionModel),
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Cvae(c) => Model::Cvae(Cvae::new(c.clone(), seed)?),
            ModelConfig::Cgan(c) => Model::Cgan(Cgan::new(c.clone(), seed)?),
            ModelConfig::Diffusion(c) => {
                Model::Diffusion(DiffusionModel { net: UNet::new(c.denoiser.clone(), seed)?, schedule: c.schedule()? })
            }
        })
    }

    pub fn from_params(config: &ModelConfig, params: &ParamStore<f32>, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Cvae(c) => Model::Cvae(Cvae::from_params(c.clone(), params, seed)?),
            ModelConfig::Cgan(c) => Model::Cgan(Cgan::from_params(c.clone(), params, seed)?),
            ModelConfig::Diffusion(c) => Model::Diffusion(DiffusionModel {
                net: UNet::from_params(c.denoiser.clone(), params, seed)?,
                schedule: c.schedule()?,
            }),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.as_generator().kind()
    }

    pub fn as_generator(&self) -> &dyn Generator {
        match self {
            Model::Cvae(m) => m,
            Model::Cgan(m) => m,
            Model::Diffusion(m) => m,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::Cvae(m) => m.params(),
            Model::Cgan(m) => m.params(),
            Model::Diffusion(m) => m.net.params(),
        }
    }
}

/// Probe metrics recorded at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: Option<MetricSet>,
    pub test: Option<MetricSet>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Sample-weighted mean loss per epoch. For the CGAN this is the
    /// discriminator loss.
    pub loss: Vec<f64>,
    /// Additional per-epoch terms, such as `recon`, `kl` or `g_loss`.
    pub terms: BTreeMap<String, Vec<f64>>,
    pub metrics: Vec<EpochMetrics>,
}

/// Called after selected epochs with the model as it stands.
pub trait EpochHook {
    fn on_epoch(&mut self, epoch: usize, model: &dyn Generator) -> Result<Option<EpochMetrics>>;
}

impl EpochHook for ProbeEvaluator<'_> {
    fn on_epoch(&mut self, epoch: usize, model: &dyn Generator) -> Result<Option<EpochMetrics>> {
        let (train, test) = self.evaluate(model)?;
        Ok(Some(EpochMetrics { epoch, train, test }))
    }
}

/// Writes one row per recorded evaluation.
pub fn write_epoch_curves(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string()];
    for split in ["train", "test"] {
        for m in crate::evaluation::METRICS {
            header.push(format!("{split}_{m}"));
        }
    }
    w.write_record(&header)?;
    for row in metrics {
        let mut rec = vec![row.epoch.to_string()];
        for set in [&row.train, &row.test] {
            for m in crate::evaluation::METRICS {
                rec.push(set.as_ref().and_then(|s| s.get(m)).map(|v| v.to_string()).unwrap_or_default());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSchema {
    pub layout: Vec<String>,
    pub bounds: GeoBounds,
}

impl ConditionSchema {
    pub fn current(bounds: GeoBounds) -> Self {
        Self { layout: CONDITION_LAYOUT.iter().map(|s| s.to_string()).collect(), bounds }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub seed: u64,
    pub condition_schema: ConditionSchema,
    pub history: TrainHistory,
    pub tensors: Vec<TensorEntry>,
}

/// Trained parameters with everything needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.manifest.model_kind
    }

    pub fn history(&self) -> &TrainHistory {
        &self.manifest.history
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.manifest.model_config, &self.params, self.manifest.seed)
    }

    /// Rebuilds the model, refusing a checkpoint of a different family.
    pub fn model_as(&self, kind: ModelKind) -> Result<Model> {
        if self.kind() != kind {
            return Err(Error::Contract(format!("checkpoint holds a {} model, not {kind}", self.kind())));
        }
        self.model()
    }

    /// Conditions from `dataset` mean the same thing to this model.
    pub fn check_dataset(&self, dataset: &ProcessedDataset) -> Result<()> {
        let schema = &self.manifest.condition_schema;
        if schema != &ConditionSchema::current(dataset.bounds) {
            return Err(Error::Contract(format!(
                "dataset condition schema (bounds {:?}) differs from the checkpoint's ({:?})",
                dataset.bounds, schema.bounds
            )));
        }
        if self.manifest.model_config.input_shape() != (dataset.images.dim().1, dataset.images.dim().2) {
            return Err(Error::Contract("dataset image shape differs from the model input shape".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("tensors"))?;
        let mut manifest = self.manifest.clone();
        manifest.tensors.clear();
        for (i, (name, t)) in self.params.iter().enumerate() {
            let file = format!("tensors/{i:04}.bin");
            TensorBlob::new(name, t.shape().to_vec(), t.data().to_vec())?.write(&dir.join(&file))?;
            manifest.tensors.push(TensorEntry { name: name.to_string(), file, shape: t.shape().to_vec() });
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Format(format!("{} is not a checkpoint", dir.display())));
        }
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::Format(format!(
                    "checkpoint format version {other:?} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
        }
        let manifest: CheckpointManifest =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if manifest.model_config.kind() != manifest.model_kind {
            return Err(Error::Format("model_kind disagrees with model_config".into()));
        }
        let mut params = ParamStore::new();
        for entry in &manifest.tensors {
            let blob = TensorBlob::read(&dir.join(&entry.file))?;
            if blob.name != entry.name || blob.shape != entry.shape {
                return Err(Error::Format(format!("tensor file {} does not match its manifest entry", entry.file)));
            }
            params.insert(blob.name, Tensor::from_vec(&blob.shape, blob.data)?);
        }
        let ckpt = Self { manifest, params };
        // Fails on missing or misshapen parameters.
        ckpt.model().map_err(|e| Error::Format(format!("checkpoint parameters: {e}")))?;
        Ok(ckpt)
    }
}

fn batch_inputs(dataset: &ProcessedDataset, idx: &[usize]) -> (Array3<f32>, Vec<ConditionVector>) {
    (dataset.images.select(Axis(0), idx), idx.iter().map(|&i| dataset.condition(i)).collect())
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape matches length")
}

fn finite(value: f64, epoch: usize, batch: usize, terms: &[(&str, f64)]) -> Result<f64> {
    if terms.iter().all(|(_, v)| v.is_finite()) && value.is_finite() {
        return Ok(value);
    }
    let terms = terms.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
    Err(Error::NonFiniteLoss { epoch, batch, terms })
}

/// Per-batch losses, keyed by term; `loss` is the primary one.
type BatchLosses = Vec<(&'static str, f64)>;

struct Trainer {
    model: Model,
    adam: Adam<f32>,
    /// Second optimizer for the CGAN generator.
    adam_g: Option<Adam<f32>>,
    rng: ChaCha8Rng,
}

impl Trainer {
    fn step(&mut self, images: &Array3<f32>, conds: &[ConditionVector]) -> Result<BatchLosses> {
        let b = conds.len();
        let c = conditions_to_tensor::<f32>(conds);
        match &mut self.model {
            Model::Diffusion(m) => {
                let (h, w) = m.net.config().input_shape;
                let mut x_t = Array3::zeros((b, h, w));
                let mut eps = Array3::zeros((b, h, w));
                let mut ts = Vec::with_capacity(b);
                for (i, cond) in conds.iter().enumerate() {
                    let (sample, target) = make_training_pair(&images.index_axis(Axis(0), i), *cond, &m.schedule, &mut self.rng);
                    x_t.index_axis_mut(Axis(0), i).assign(&sample.x_t);
                    eps.index_axis_mut(Axis(0), i).assign(&target);
                    ts.push(sample.t);
                }
                let mut g = Graph::new();
                let loss = m.net.loss(&mut g, images_to_tensor(x_t.view()), &ts, c, images_to_tensor(eps.view()))?;
                let value = g.value(loss).scalar_value() as f64;
                if value.is_finite() {
                    let grads = g.backward(loss).for_store(&g, m.net.params());
                    self.adam.step(m.net.params_mut(), &grads);
                }
                Ok(vec![("loss", value)])
            }
            Model::Cvae(m) => {
                let eta = normal_tensor(&[b, m.config().latent_dim], &mut self.rng);
                let mut g = Graph::new();
                let l = m.loss_graph(&mut g, images_to_tensor(images.view()), c, eta)?;
                let total = g.value(l.total).scalar_value() as f64;
                let recon = g.value(l.recon).scalar_value() as f64;
                let kl = g.value(l.kl).scalar_value() as f64;
                if total.is_finite() {
                    let grads = g.backward(l.total).for_store(&g, m.params());
                    self.adam.step(m.params_mut(), &grads);
                }
                Ok(vec![("loss", total), ("recon", recon), ("kl", kl)])
            }
            Model::Cgan(m) => {
                let noise = normal_tensor(&[b, m.config().noise_dim], &mut self.rng);
                let mut gg = Graph::new();
                let z = gg.constant(noise);
                let cg = gg.constant(c.clone());
                let fake = m.generate_graph(&mut gg, z, cg)?;

                // Discriminator step on real and detached fake grids.
                let mut gd = Graph::new();
                let cd = gd.constant(c);
                let real = gd.constant(images_to_tensor(images.view()));
                let fake_d = gd.constant(gg.value(fake).clone());
                let lr = m.discriminate_graph(&mut gd, real, cd)?;
                let lf = m.discriminate_graph(&mut gd, fake_d, cd)?;
                let loss_real = gd.bce_with_logits(lr, 1.0);
                let loss_fake = gd.bce_with_logits(lf, 0.0);
                let d_loss = gd.add_scaled(loss_real, loss_fake, 0.5, 0.5);
                let d_value = gd.value(d_loss).scalar_value() as f64;
                if d_value.is_finite() {
                    let grads = gd.backward(d_loss).for_store(&gd, m.params());
                    let grads = m.select_grads(grads, crate::baselines::DISCRIMINATOR_PREFIX);
                    self.adam.step(m.params_mut(), &grads);
                }

                // Generator step against the updated discriminator.
                let lg = m.discriminate_graph(&mut gg, fake, cg)?;
                let g_loss = gg.bce_with_logits(lg, 1.0);
                let g_value = gg.value(g_loss).scalar_value() as f64;
                if g_value.is_finite() && d_value.is_finite() {
                    let grads = gg.backward(g_loss).for_store(&gg, m.params());
                    let grads = m.select_grads(grads, crate::baselines::GENERATOR_PREFIX);
                    self.adam_g.as_mut().expect("generator optimizer").step(m.params_mut(), &grads);
                }
                Ok(vec![("loss", d_value), ("g_loss", g_value)])
            }
        }
    }
}

/// Trains a model on the train split of `dataset`.
///
/// Batches are reshuffled each epoch from a stream keyed by `(seed, epoch)`,
/// so a run is reproducible from its configuration. With zero epochs the
/// checkpoint holds the initial parameters.
pub fn train(
    dataset: &ProcessedDataset,
    config: &TrainConfig,
    model_config: &ModelConfig,
    mut hook: Option<&mut dyn EpochHook>,
) -> Result<Checkpoint> {
    config.validate()?;
    if model_config.kind() != config.model_kind {
        return Err(Error::Config(format!(
            "training config is for {} but the model config is for {}",
            config.model_kind,
            model_config.kind()
        )));
    }
    let shape = (dataset.images.dim().1, dataset.images.dim().2);
    if shape != model_config.input_shape() {
        return Err(Error::Contract(format!(
            "dataset grids are {shape:?} but the model expects {:?}",
            model_config.input_shape()
        )));
    }
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    let model = Model::new(model_config, config.seed)?;
    let betas = |store| Adam::with_betas(store, config.learning_rate, 0.9, 0.999, 1e-8);
    let adam = betas(model.params());
    let adam_g = matches!(model, Model::Cgan(_)).then(|| betas(model.params()));
    let mut trainer = Trainer { model, adam, adam_g, rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1])) };

    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64])));
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let (images, conds) = batch_inputs(dataset, idx);
            let losses = trainer.step(&images, &conds)?;
            finite(losses[0].1, epoch, batch, &losses)?;
            for (k, v) in losses {
                *sums.entry(k).or_default() += v * idx.len() as f64;
            }
        }
        let n = order.len() as f64;
        for (k, v) in sums {
            if k == "loss" {
                history.loss.push(v / n);
            } else {
                history.terms.entry(k.to_string()).or_default().push(v / n);
            }
        }
        log::debug!("{} epoch {}/{} loss {:.6}", config.model_kind, epoch + 1, config.epochs, history.loss[epoch]);
        let done = epoch + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 {
            if let Some(h) = hook.as_deref_mut() {
                if let Some(m) = h.on_epoch(done, trainer.model.as_generator())? {
                    history.metrics.push(m);
                }
            }
        }
    }
    if let Some(last) = history.loss.last() {
        log::info!("{} trained for {} epochs, final loss {last:.6}", config.model_kind, config.epochs);
    }
    Ok(Checkpoint {
        manifest: CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            model_kind: config.model_kind,
            model_config: model_config.clone(),
            train_config: config.clone(),
            epoch: config.epochs,
            seed: config.seed,
            condition_schema: ConditionSchema::current(dataset.bounds),
            history,
            tensors: Vec::new(),
        },
        params: trainer.model.params().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::tests::toy_dataset;
    use crate::data::split_train_test;
    use crate::evaluation::FeatureExtractor;

    fn tiny_diffusion() -> ModelConfig {
        ModelConfig::Diffusion(DiffusionConfig {
            denoiser: DenoiserConfig { hidden_features: 16, time_embed_dim: 8, diffusion_steps: 50, ..Default::default() },
            ..Default::default()
        })
    }

    fn tiny_cvae() -> ModelConfig {
        ModelConfig::Cvae(CvaeConfig {
            encoder_filters: vec![4, 8],
            decoder_filters: vec![8, 4],
            dense_dim: 8,
            latent_dim: 4,
            ..Default::default()
        })
    }

    fn tiny_cgan() -> ModelConfig {
        ModelConfig::Cgan(CganConfig { disc_filters: vec![4, 8], gen_filters: vec![8, 4], noise_dim: 4, ..Default::default() })
    }

    fn cfg(kind: ModelKind, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { epochs, batch_size: 4, seed, learning_rate: 1e-3, ..TrainConfig::for_kind(kind) }
    }

    #[test]
    fn defaults_per_kind() {
        let c = TrainConfig::for_kind(ModelKind::Cgan);
        assert_eq!((c.epochs, c.learning_rate, c.batch_size), (15_000, 1e-4, 64));
        let d = TrainConfig::for_kind(ModelKind::Diffusion);
        assert_eq!((d.epochs, d.learning_rate, d.batch_size), (1000, 1e-3, 10));
        let v = TrainConfig::for_kind(ModelKind::Cvae);
        assert_eq!((v.epochs, v.learning_rate, v.batch_size), (100, 1e-3, 64));
    }

    #[test]
    fn diffusion_loss_decreases() {
        let ds = split_train_test(toy_dataset(8), 0.75, 0).unwrap();
        for seed in 0..3 {
            let ck = train(&ds, &cfg(ModelKind::Diffusion, 50, seed), &tiny_diffusion(), None).unwrap();
            let loss = &ck.history().loss;
            assert_eq!(loss.len(), 50);
            let head: f64 = loss[..5].iter().sum::<f64>() / 5.0;
            let tail: f64 = loss[45..].iter().sum::<f64>() / 5.0;
            assert!(tail < head, "seed {seed}: {head} -> {tail}");
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_keeps_init() {
        let ds = split_train_test(toy_dataset(8), 0.75, 0).unwrap();
        for mc in [tiny_cvae(), tiny_cgan()] {
            let kind = mc.kind();
            let a = train(&ds, &cfg(kind, 2, 9), &mc, None).unwrap();
            let b = train(&ds, &cfg(kind, 2, 9), &mc, None).unwrap();
            assert_eq!(a.history(), b.history());
            for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
                assert_eq!(x.data(), y.data());
            }
            let zero = train(&ds, &cfg(kind, 0, 9), &mc, None).unwrap();
            let init = Model::new(&mc, 9).unwrap();
            for ((_, x), (_, y)) in zero.params.iter().zip(init.params().iter()) {
                assert_eq!(x.data(), y.data());
            }
            assert!(zero.history().loss.is_empty());
        }
        let cgan = train(&ds, &cfg(ModelKind::Cgan, 2, 9), &tiny_cgan(), None).unwrap();
        assert_eq!(cgan.history().terms["g_loss"].len(), 2);
        let cvae = train(&ds, &cfg(ModelKind::Cvae, 2, 9), &tiny_cvae(), None).unwrap();
        assert_eq!(cvae.history().terms["kl"].len(), 2);
    }

    #[test]
    fn mismatched_configs_are_rejected() {
        let ds = split_train_test(toy_dataset(8), 0.75, 0).unwrap();
        assert!(matches!(train(&ds, &cfg(ModelKind::Cvae, 1, 0), &tiny_cgan(), None), Err(Error::Config(_))));
        let bad = TrainConfig { batch_size: 0, ..cfg(ModelKind::Cvae, 1, 0) };
        assert!(matches!(train(&ds, &bad, &tiny_cvae(), None), Err(Error::Config(_))));
    }

    #[test]
    fn nan_learning_rate_blows_up_as_non_finite_loss() {
        let ds = split_train_test(toy_dataset(8), 0.75, 0).unwrap();
        let c = TrainConfig { learning_rate: 1e30, ..cfg(ModelKind::Cvae, 5, 0) };
        match train(&ds, &c, &tiny_cvae(), None) {
            Err(Error::NonFiniteLoss { terms, .. }) => assert!(terms.contains("loss=")),
            other => panic!("expected a non-finite loss, got {:?}", other.map(|c| c.history().loss.clone())),
        }
    }

    #[test]
    fn hook_runs_on_schedule_and_curves_are_written() {
        let ds = split_train_test(toy_dataset(8), 0.75, 0).unwrap();
        let ex = FeatureExtractor::seeded_random_conv(0);
        let mut probe = ProbeEvaluator::new(&ds, &ex, 64, 0);
        let c = TrainConfig { eval_every: 2, ..cfg(ModelKind::Cvae, 5, 0) };
        let ck = train(&ds, &c, &tiny_cvae(), Some(&mut probe)).unwrap();
        let epochs: Vec<usize> = ck.history().metrics.iter().map(|m| m.epoch).collect();
        assert_eq!(epochs, vec![2, 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_epoch_curves(&path, &ck.history().metrics).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,train_fid,train_kl,train_rmse,train_r2,test_fid,"));
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let ds = split_train_test(toy_dataset(8), 0.75, 0).unwrap();
        let ck = train(&ds, &cfg(ModelKind::Cvae, 1, 3), &tiny_cvae(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.manifest.history, ck.manifest.history);
        assert_eq!(back.manifest.condition_schema, ck.manifest.condition_schema);
        for ((n1, x), (n2, y)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(x.data(), y.data());
        }
        let conds: Vec<_> = (0..2).map(|i| ds.condition(i)).collect();
        let g1 = ck.model().unwrap().as_generator().generate(&conds, &[1, 2]).unwrap();
        let g2 = back.model().unwrap().as_generator().generate(&conds, &[1, 2]).unwrap();
        assert_eq!(g1, g2);
        back.check_dataset(&ds).unwrap();
        assert!(matches!(back.model_as(ModelKind::Diffusion), Err(Error::Contract(_))));

        let manifest = path.join("manifest.json");
        let original = std::fs::read_to_string(&manifest).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&original).unwrap();
        v["format_version"] = 99.into();
        std::fs::write(&manifest, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));

        let mut v: serde_json::Value = serde_json::from_str(&original).unwrap();
        v.as_object_mut().unwrap().remove("condition_schema");
        std::fs::write(&manifest, v.to_string()).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Format(m)) => assert!(m.contains("condition_schema")),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
