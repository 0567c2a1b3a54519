//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use meterdiff::baselines::{Cvae, CvaeConfig};
use meterdiff::data::ConditionVector;
use meterdiff::denoiser::{DenoiserConfig, UNet};
use meterdiff::experiment::ExperimentConfig;
use meterdiff::models::{conditions_to_tensor, images_to_tensor};
use meterdiff_nn::{Graph, ParamStore, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

fn conditions(n: usize) -> Vec<ConditionVector> {
    (0..n)
        .map(|i| {
            let mut v = [0.0f32; 13];
            v[0] = if i % 2 == 0 { -1.0 } else { 1.0 };
            v[1] = 0.3 - 0.2 * i as f32;
            v[2] = -0.5 + 0.4 * i as f32;
            v[3 + i % 5] = 1.0;
            v[8 + (i + 2) % 5] = 1.0;
            ConditionVector::from_slice(&v).unwrap()
        })
        .collect()
}

/// One compared element: where it is and how far apart the two derivatives are.
#[derive(Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

/// Picks `count` random (parameter, element) pairs and compares the analytic
/// derivative with a central difference of `loss`.
fn check<M>(
    model: &mut M,
    params: fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> (f64, Vec<Option<Tensor<f64>>>),
    only: Option<&str>,
    count: usize,
    seed: u64,
) -> Vec<Probe> {
    let (_, grads) = loss(model);
    let store = params(model);
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    while probes.len() < count {
        let p = rng.random_range(0..names.len());
        if only.is_some_and(|prefix| !names[p].starts_with(prefix)) {
            continue;
        }
        let Some(grad) = &grads[p] else { continue };
        let i = rng.random_range(0..grad.len());
        let analytic = grad.data()[i];
        let nudge = |m: &mut M, delta: f64| {
            let store = params(m);
            let t = store.tensors_mut().nth(p).unwrap();
            t.data_mut()[i] += delta;
        };
        nudge(model, STEP);
        let up = loss(model).0;
        nudge(model, -2.0 * STEP);
        let down = loss(model).0;
        nudge(model, STEP);
        let numeric = (up - down) / (2.0 * STEP);
        let relative = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        probes.push(Probe { param: names[p].clone(), index: i, analytic, numeric, relative });
    }
    probes
}

/// Noise-prediction loss of a tiny U-Net.
pub fn denoiser_probes() -> Vec<Probe> {
    let config = DenoiserConfig {
        hidden_features: 8,
        time_embed_dim: 8,
        input_shape: (8, 8),
        diffusion_steps: 50,
        ..Default::default()
    };
    let mut net = UNet::<f64>::new(config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(-1.0f32..1.0));
    let target = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(-2.0f32..2.0));
    let conds = conditions(2);
    let t = [3, 41];
    let loss = |net: &UNet<f64>| {
        let mut g = Graph::new();
        let l = net
            .loss(&mut g, images_to_tensor(x.view()), &t, conditions_to_tensor(&conds), images_to_tensor(target.view()))
            .unwrap();
        let grads = g.backward(l).for_store(&g, net.params());
        (g.value(l).scalar_value(), grads)
    };
    check(&mut net, UNet::params_mut, loss, None, 10, 11)
}

/// Reconstruction plus KL loss of a tiny CVAE with a fixed reparameterization draw.
pub fn cvae_probes() -> Vec<Probe> {
    let config = CvaeConfig {
        encoder_filters: vec![4, 6],
        decoder_filters: vec![6, 4],
        dense_dim: 5,
        latent_dim: 6,
        input_shape: (8, 8),
        ..Default::default()
    };
    let mut model = Cvae::<f64>::new(config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(-1.0f32..1.0));
    let eta: Vec<f64> = (0..12).map(|_| rng.random_range(-1.5..1.5)).collect();
    let conds = conditions(2);
    let loss = |m: &Cvae<f64>| {
        let mut g = Graph::new();
        let l = m
            .loss_graph(
                &mut g,
                images_to_tensor(x.view()),
                conditions_to_tensor(&conds),
                Tensor::from_vec(&[2, 6], eta.clone()).unwrap(),
            )
            .unwrap();
        let grads = g.backward(l.total).for_store(&g, m.params());
        (g.value(l.total).scalar_value(), grads)
    };
    let mut probes = check(&mut model, Cvae::params_mut, loss, None, 10, 5);
    // The variance head reaches the loss only through the reparameterized
    // draw and the KL term, so give it a dedicated sample.
    probes.extend(check(&mut model, Cvae::params_mut, loss, Some("encoder.log_var"), 10, 6));
    probes
}

/// The probe with the largest relative error.
pub fn worst(probes: &[Probe]) -> &Probe {
    probes.iter().max_by(|a, b| a.relative.total_cmp(&b.relative)).expect("at least one probe")
}

/// A three-model run small enough for a test, optionally with a diffusion
/// learning rate that blows up.
pub fn tiny_experiment(out: &Path, diffusion_lr: Option<f64>) -> ExperimentConfig {
    let lr = diffusion_lr.map(|v| format!("learning_rate = {v:e}")).unwrap_or_default();
    let text = format!(
        r#"
name = "tiny"
seed = 4
output_dir = "{}"

[data.synthetic]
meters = 32
seed = 9

[preprocess]
subsample_meters = 32

[evaluation]
repetitions = 2
probe_size = 2

[models.cvae]
epochs = 5
eval_every = 2
batch_size = 8
[models.cvae.architecture]
latent_dim = 8
dense_dim = 8
encoder_filters = [4, 8]
decoder_filters = [8, 4]

[models.cgan]
epochs = 50
eval_every = 20
batch_size = 8
[models.cgan.architecture]
noise_dim = 8
disc_filters = [4, 8]
gen_filters = [8, 4]

[models.diffusion]
epochs = 10
eval_every = 3
batch_size = 8
{lr}
[models.diffusion.architecture.denoiser]
hidden_features = 8
time_embed_dim = 8
diffusion_steps = 10
"#,
        out.display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

/// Relative paths of every file under `dir`, with `/` separators.
pub fn files_under(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap();
                out.insert(rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out
}
