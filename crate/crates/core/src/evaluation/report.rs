use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{ExtractorKind, FeatureExtractor};
use super::metrics::{compute_fid, compute_kl_with, compute_rmse_r2, KlOptions};
use crate::data::{ProcessedDataset, Split};
use crate::error::{Error, Result};
use crate::models::{Generator, ModelKind};
use crate::seeds::{derive_seed, name_key};

pub const EVAL_REPORT_VERSION: u32 = 1;
pub const METRICS: [&str; 4] = ["fid", "kl", "rmse", "r2"];

/// Metrics for one set of paired real and generated grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Absent when the set is too small to fit a covariance.
    pub fid: Option<f64>,
    pub kl: f64,
    pub rmse: f64,
    pub r2: f64,
}

impl MetricSet {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "fid" => self.fid,
            "kl" => Some(self.kl),
            "rmse" => Some(self.rmse),
            "r2" => Some(self.r2),
            _ => None,
        }
    }

    /// Compares `real[i]` with `synthetic[i]` for every row.
    pub fn compute(
        real: &Array3<f32>,
        synthetic: &Array3<f32>,
        extractor: &FeatureExtractor,
        kl: &KlOptions,
    ) -> Result<Self> {
        if real.dim() != synthetic.dim() {
            return Err(Error::Contract(format!("real {:?} vs synthetic {:?}", real.dim(), synthetic.dim())));
        }
        let fr = extractor.extract(real.view())?;
        let fs = extractor.extract(synthetic.view())?;
        Self::from_parts(real, synthetic, &fr, &fs, kl)
    }

    fn from_parts(
        real: &Array3<f32>,
        synthetic: &Array3<f32>,
        real_features: &ndarray::Array2<f64>,
        synthetic_features: &ndarray::Array2<f64>,
        kl: &KlOptions,
    ) -> Result<Self> {
        let r: Vec<f32> = real.iter().copied().collect();
        let s: Vec<f32> = synthetic.iter().copied().collect();
        let fid = if real.dim().0 >= 2 {
            Some(compute_fid(real_features.view(), synthetic_features.view())?)
        } else {
            None
        };
        let (rmse, r2) = compute_rmse_r2(&r, &s)?;
        Ok(Self { fid, kl: compute_kl_with(&r, &s, kl)?, rmse, r2 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: Option<f64>,
    /// Sample standard deviation; only reported for two or more values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MetricStat {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: None, std: None, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self { mean: Some(mean), std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: String,
    pub samples: usize,
    pub metrics: BTreeMap<String, MetricStat>,
    pub per_repetition: Vec<MetricSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorInfo {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub output_dim: usize,
}

impl From<&FeatureExtractor> for ExtractorInfo {
    fn from(e: &FeatureExtractor) -> Self {
        Self { kind: e.kind().clone(), seed: e.seed(), output_dim: e.output_dim() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub model: ModelKind,
    pub extractor: ExtractorInfo,
    pub base_seed: u64,
    pub repetitions: usize,
    /// Hash of the sorted test meter ids; reports are only comparable when
    /// these agree.
    pub test_fingerprint: String,
    pub test_meters: usize,
    pub slices: Vec<SliceReport>,
}

impl EvalReport {
    pub fn slice(&self, name: &str) -> Option<&SliceReport> {
        self.slices.iter().find(|s| s.slice == name)
    }

    pub fn mean(&self, slice: &str, metric: &str) -> Option<f64> {
        self.slice(slice)?.metrics.get(metric)?.mean
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Appends `model,slice,metric,mean,std,repetitions` rows.
    pub fn write_csv_rows(&self, out: &mut impl Write) -> Result<()> {
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for s in &self.slices {
            for m in METRICS {
                let stat = &s.metrics[m];
                w.write_record([
                    self.model.as_str(),
                    &s.slice,
                    m,
                    &fmt(stat.mean),
                    &fmt(stat.std),
                    &self.repetitions.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "model,slice,metric,mean,std,repetitions")?;
        for r in reports {
            r.write_csv_rows(&mut f)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Slice names paired with the member row positions within `indices`.
pub fn slice_names(dataset: &ProcessedDataset, indices: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("overall".to_string(), (0..indices.len()).collect::<Vec<_>>())];
    let mut by_meter: BTreeMap<usize, (String, Vec<usize>)> = BTreeMap::new();
    let mut by_building: BTreeMap<usize, (String, Vec<usize>)> = BTreeMap::new();
    for (pos, &i) in indices.iter().enumerate() {
        let r = &dataset.records[i];
        by_meter
            .entry(r.meter_type.index())
            .or_insert_with(|| (format!("meter_type:{}", r.meter_type), Vec::new()))
            .1
            .push(pos);
        by_building
            .entry(r.building_type.index())
            .or_insert_with(|| (format!("building_type:{}", r.building_type), Vec::new()))
            .1
            .push(pos);
    }
    out.extend(by_meter.into_values());
    out.extend(by_building.into_values());
    out
}

fn fingerprint(dataset: &ProcessedDataset, indices: &[usize]) -> String {
    let mut ids: Vec<String> =
        indices.iter().map(|&i| format!("{}@{}", dataset.records[i].meter_id, dataset.records[i].year)).collect();
    ids.sort();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Seeds for one generated grid per meter. They depend on the meter id, not
/// on its position, so reordering the test set does not change samples.
fn meter_seeds(dataset: &ProcessedDataset, indices: &[usize], seed: u64) -> Vec<u64> {
    indices.iter().map(|&i| derive_seed(seed, &[name_key(&dataset.records[i].meter_id)])).collect()
}

fn gather(dataset: &ProcessedDataset, indices: &[usize]) -> Array3<f32> {
    dataset.images.select(Axis(0), indices)
}

/// Generates one grid per test meter per repetition and aggregates metrics
/// over the overall, meter-type and building-type slices. Repetition `r`
/// uses base seed `base_seed + r`.
pub fn evaluate_generator(
    generator: &dyn Generator,
    dataset: &ProcessedDataset,
    extractor: &FeatureExtractor,
    repetitions: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    if repetitions == 0 {
        return Err(Error::Config("evaluation needs at least one repetition".into()));
    }
    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::InsufficientData("dataset has no test split".into()));
    }
    let kl = KlOptions::default();
    let real = gather(dataset, &test);
    let real_features = extractor.extract(real.view())?;
    let conditions: Vec<_> = test.iter().map(|&i| dataset.condition(i)).collect();
    let slices = slice_names(dataset, &test);
    let mut per_rep: Vec<Vec<MetricSet>> = vec![Vec::with_capacity(repetitions); slices.len()];
    for r in 0..repetitions {
        let seed = base_seed.wrapping_add(r as u64);
        log::info!("evaluating {} repetition {}/{repetitions}", generator.kind(), r + 1);
        let synthetic = generator.generate(&conditions, &meter_seeds(dataset, &test, seed))?;
        let synthetic_features = extractor.extract(synthetic.view())?;
        for (k, (_, members)) in slices.iter().enumerate() {
            let set = MetricSet::from_parts(
                &real.select(Axis(0), members),
                &synthetic.select(Axis(0), members),
                &real_features.select(Axis(0), members),
                &synthetic_features.select(Axis(0), members),
                &kl,
            )
            .map_err(|e| Error::Repetition { repetition: r, source: Box::new(e) })?;
            per_rep[k].push(set);
        }
    }
    let slices = slices
        .into_iter()
        .zip(per_rep)
        .map(|((slice, members), sets)| {
            let metrics = METRICS
                .iter()
                .map(|m| {
                    let values: Vec<f64> = sets.iter().filter_map(|s| s.get(m)).collect();
                    (m.to_string(), MetricStat::from_values(&values))
                })
                .collect();
            SliceReport { slice, samples: members.len(), metrics, per_repetition: sets }
        })
        .collect();
    Ok(EvalReport {
        format_version: EVAL_REPORT_VERSION,
        model: generator.kind(),
        extractor: extractor.into(),
        base_seed,
        repetitions,
        test_fingerprint: fingerprint(dataset, &test),
        test_meters: test.len(),
        slices,
    })
}

/// Evaluates a stored model; see [`evaluate_generator`].
pub fn evaluate_all(
    checkpoint: &crate::training::Checkpoint,
    dataset: &ProcessedDataset,
    extractor: &FeatureExtractor,
    repetitions: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    checkpoint.check_dataset(dataset)?;
    let model = checkpoint.model()?;
    evaluate_generator(model.as_generator(), dataset, extractor, repetitions, base_seed)
}

/// Fixed probe conditions from each split, scored during training.
#[derive(Debug)]
pub struct ProbeEvaluator<'a> {
    dataset: &'a ProcessedDataset,
    extractor: &'a FeatureExtractor,
    train: Vec<usize>,
    test: Vec<usize>,
    seed: u64,
}

impl<'a> ProbeEvaluator<'a> {
    pub fn new(dataset: &'a ProcessedDataset, extractor: &'a FeatureExtractor, probe_size: usize, seed: u64) -> Self {
        let pick = |split: Split, stream: u64| {
            let mut idx = dataset.indices(split);
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream])));
            idx.truncate(probe_size);
            idx.sort_unstable();
            idx
        };
        Self { dataset, extractor, train: pick(Split::Train, 0), test: pick(Split::Test, 1), seed }
    }

    pub fn probe_sizes(&self) -> (usize, usize) {
        (self.train.len(), self.test.len())
    }

    fn score(&self, generator: &dyn Generator, indices: &[usize]) -> Result<Option<MetricSet>> {
        if indices.is_empty() {
            return Ok(None);
        }
        let conditions: Vec<_> = indices.iter().map(|&i| self.dataset.condition(i)).collect();
        let synthetic = generator.generate(&conditions, &meter_seeds(self.dataset, indices, self.seed))?;
        MetricSet::compute(&gather(self.dataset, indices), &synthetic, self.extractor, &KlOptions::default()).map(Some)
    }

    /// Metrics on the train and test probes.
    pub fn evaluate(&self, generator: &dyn Generator) -> Result<(Option<MetricSet>, Option<MetricSet>)> {
        Ok((self.score(generator, &self.train)?, self.score(generator, &self.test)?))
    }
}
