use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BuildingType, ConditionVector, GeoBounds, MeterType, CONDITION_DIM, CONDITION_LAYOUT, HOURS_PER_WEEK, WEEKS};
use crate::error::{Error, Result};
use crate::tensor_io::TensorBlob;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const DATASET_FORMAT: &str = "meterdiff-dataset";
const IMAGES_FILE: &str = "images.bin";
const CONDITIONS_FILE: &str = "conditions.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Identity and scaling information for one row of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub meter_id: String,
    pub building_id: String,
    pub year: i32,
    pub meter_type: MeterType,
    pub building_type: BuildingType,
    pub latitude: f64,
    pub longitude: f64,
    pub norm_min: f64,
    pub norm_max: f64,
    pub constant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedDataset {
    /// `N x 52 x 168`, values in [-1, 1].
    pub images: Array3<f32>,
    /// `N x 13`.
    pub conditions: Array2<f32>,
    pub records: Vec<SampleRecord>,
    pub split_labels: Vec<Split>,
    pub bounds: GeoBounds,
    pub split_seed: Option<u64>,
    pub train_fraction: Option<f64>,
}

impl ProcessedDataset {
    /// Assembles an unsplit dataset; every row starts labelled `Train`.
    pub fn new(images: Array3<f32>, conditions: Array2<f32>, records: Vec<SampleRecord>, bounds: GeoBounds) -> Result<Self> {
        let n = records.len();
        let ds = Self {
            images,
            conditions,
            records,
            split_labels: vec![Split::Train; n],
            bounds,
            split_seed: None,
            train_fraction: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.records.len();
        if self.images.dim() != (n, WEEKS, HOURS_PER_WEEK) {
            return Err(Error::Format(format!("images {:?} do not match {n} records", self.images.dim())));
        }
        if self.conditions.dim() != (n, CONDITION_DIM) {
            return Err(Error::Format(format!("conditions {:?} do not match {n} records", self.conditions.dim())));
        }
        if self.split_labels.len() != n {
            return Err(Error::Format(format!("{} split labels for {n} records", self.split_labels.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn meter_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.meter_id.as_str()).collect()
    }

    pub fn image(&self, i: usize) -> ArrayView2<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    pub fn condition(&self, i: usize) -> ConditionVector {
        let row = self.conditions.row(i);
        ConditionVector {
            values: row.to_vec().try_into().expect("condition width validated"),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_labels[i] == split).collect()
    }

    pub fn position(&self, meter_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.meter_id == meter_id)
    }

    /// Rows at `indices`, in that order, keeping labels and bounds.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), indices),
            conditions: self.conditions.select(Axis(0), indices),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            split_labels: indices.iter().map(|&i| self.split_labels[i]).collect(),
            bounds: self.bounds,
            split_seed: self.split_seed,
            train_fraction: self.train_fraction,
        }
    }
}

/// Randomly assigns whole meters to train or test.
///
/// The train side receives `floor(train_frac * meters)` meters, kept within
/// `1..meters` so neither side is empty.
pub fn split_train_test(mut ds: ProcessedDataset, train_frac: f64, seed: u64) -> Result<ProcessedDataset> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Config(format!("train fraction {train_frac} outside [0, 1]")));
    }
    let mut meters: Vec<&str> = Vec::new();
    let mut group: HashMap<&str, usize> = HashMap::new();
    for r in &ds.records {
        group.entry(r.meter_id.as_str()).or_insert_with(|| {
            meters.push(r.meter_id.as_str());
            meters.len() - 1
        });
    }
    let m = meters.len();
    if m < 2 {
        return Err(Error::InsufficientData(format!("splitting needs at least 2 meters, found {m}")));
    }
    let n_train = ((train_frac * m as f64).floor() as usize).clamp(1, m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut label = vec![Split::Test; m];
    for &g in &order[..n_train] {
        label[g] = Split::Train;
    }
    let labels: Vec<Split> = ds.records.iter().map(|r| label[group[r.meter_id.as_str()]]).collect();
    ds.split_labels = labels;
    ds.split_seed = Some(seed);
    ds.train_fraction = Some(train_frac);
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    #[serde(flatten)]
    record: SampleRecord,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    schema_version: u32,
    count: usize,
    image_shape: [usize; 2],
    condition_layout: Vec<String>,
    bounds: GeoBounds,
    split_seed: Option<u64>,
    train_fraction: Option<f64>,
    tensors: BTreeMap<String, String>,
    samples: Vec<ManifestSample>,
}

pub fn save_dataset(ds: &ProcessedDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let n = ds.len();
    let images = TensorBlob::new("images", vec![n, WEEKS, HOURS_PER_WEEK], ds.images.iter().copied().collect())?;
    let conditions = TensorBlob::new("conditions", vec![n, CONDITION_DIM], ds.conditions.iter().copied().collect())?;
    images.write(&dir.join(IMAGES_FILE))?;
    conditions.write(&dir.join(CONDITIONS_FILE))?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        schema_version: DATASET_SCHEMA_VERSION,
        count: n,
        image_shape: [WEEKS, HOURS_PER_WEEK],
        condition_layout: CONDITION_LAYOUT.iter().map(|s| s.to_string()).collect(),
        bounds: ds.bounds,
        split_seed: ds.split_seed,
        train_fraction: ds.train_fraction,
        tensors: [("images", IMAGES_FILE), ("conditions", CONDITIONS_FILE)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        samples: ds
            .records
            .iter()
            .zip(&ds.split_labels)
            .map(|(r, s)| ManifestSample {
                record: r.clone(),
                split: *s,
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<ProcessedDataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: bad manifest: {e}", dir.display())))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("{}: not a dataset ({})", dir.display(), manifest.format)));
    }
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "dataset schema version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.condition_layout != CONDITION_LAYOUT {
        return Err(Error::Format("dataset condition layout differs from this build".into()));
    }
    let n = manifest.count;
    if manifest.samples.len() != n {
        return Err(Error::Format(format!("manifest count {n} but {} sample entries", manifest.samples.len())));
    }
    let tensor = |name: &str| -> Result<TensorBlob> {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest lists no `{name}` tensor")))?;
        TensorBlob::read(&dir.join(file))
    };
    let images = tensor("images")?;
    let conditions = tensor("conditions")?;
    if images.shape != [n, WEEKS, HOURS_PER_WEEK] {
        return Err(Error::Format(format!("images tensor {:?} does not match manifest count {n}", images.shape)));
    }
    if conditions.shape != [n, CONDITION_DIM] {
        return Err(Error::Format(format!(
            "conditions tensor {:?} does not match manifest count {n}",
            conditions.shape
        )));
    }
    let (records, split_labels) = manifest.samples.into_iter().map(|s| (s.record, s.split)).unzip();
    let ds = ProcessedDataset {
        images: Array3::from_shape_vec((n, WEEKS, HOURS_PER_WEEK), images.data).expect("shape checked"),
        conditions: Array2::from_shape_vec((n, CONDITION_DIM), conditions.data).expect("shape checked"),
        records,
        split_labels,
        bounds: manifest.bounds,
        split_seed: manifest.split_seed,
        train_fraction: manifest.train_fraction,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{encode_conditions, MeterMetadata};
    use proptest::prelude::*;

    /// A small dataset with deterministic contents for tests across the crate.
    pub(crate) fn toy_dataset(n: usize) -> ProcessedDataset {
        let bounds = GeoBounds {
            lat_min: 30.0,
            lat_max: 50.0,
            lon_min: -120.0,
            lon_max: -70.0,
        };
        let mut records = Vec::new();
        let mut conditions = Array2::zeros((n, CONDITION_DIM));
        let mut images = Array3::zeros((n, WEEKS, HOURS_PER_WEEK));
        for i in 0..n {
            let meta = MeterMetadata {
                meter_id: format!("m{i:03}"),
                building_id: format!("b{}", i / 2),
                meter_type: MeterType::ALL[i % 5],
                building_type: BuildingType::ALL[(i / 5) % 5],
                latitude: 30.0 + (i % 7) as f64 * 3.0,
                longitude: -120.0 + (i % 11) as f64 * 5.0,
            };
            let year = if i % 3 == 0 { 2016 } else { 2017 };
            let c = encode_conditions(&meta, year, &bounds).unwrap();
            conditions.row_mut(i).assign(&ndarray::ArrayView1::from(&c.values[..]));
            for ((w, h), v) in images.index_axis_mut(Axis(0), i).indexed_iter_mut() {
                *v = (((w * 168 + h + 13 * i) as f32) * 0.05).sin() * 0.8;
            }
            records.push(SampleRecord {
                meter_id: meta.meter_id,
                building_id: meta.building_id,
                year,
                meter_type: meta.meter_type,
                building_type: meta.building_type,
                latitude: meta.latitude,
                longitude: meta.longitude,
                norm_min: 0.0,
                norm_max: 10.0 + i as f64,
                constant: false,
            });
        }
        ProcessedDataset::new(images, conditions, records, bounds).unwrap()
    }

    #[test]
    fn full_scale_split_counts() {
        let ds = toy_dataset(1828);
        let ds = split_train_test(ds, 0.75, 42).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 1371);
        assert_eq!(ds.indices(Split::Test).len(), 457);
    }

    #[test]
    fn four_meters_split_three_one() {
        let ds = split_train_test(toy_dataset(4), 0.75, 1).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 3);
        assert_eq!(ds.indices(Split::Test).len(), 1);
        assert!(split_train_test(toy_dataset(1), 0.75, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let a = split_train_test(toy_dataset(40), 0.75, 9).unwrap();
        let b = split_train_test(toy_dataset(40), 0.75, 9).unwrap();
        let c = split_train_test(toy_dataset(40), 0.75, 10).unwrap();
        assert_eq!(a.split_labels, b.split_labels);
        assert_ne!(a.split_labels, c.split_labels);
    }

    #[test]
    fn rows_of_one_meter_share_a_side() {
        let mut ds = toy_dataset(10);
        for i in 0..10 {
            ds.records[i].meter_id = format!("g{}", i / 2);
        }
        let ds = split_train_test(ds, 0.75, 3).unwrap();
        for i in (0..10).step_by(2) {
            assert_eq!(ds.split_labels[i], ds.split_labels[i + 1]);
        }
        assert_eq!(ds.indices(Split::Train).len(), 6);
    }

    #[test]
    fn save_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = split_train_test(toy_dataset(6), 0.75, 5).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        let bits = |a: &Array3<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.images), bits(&ds.images));
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupt_or_inconsistent_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(3);
        save_dataset(&ds, dir.path()).unwrap();
        let images = dir.path().join(IMAGES_FILE);
        let bytes = fs::read(&images).unwrap();
        fs::write(&images, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

        save_dataset(&toy_dataset(2), dir.path()).unwrap();
        let manifest = dir.path().join("manifest.json");
        let full = toy_dataset(3);
        save_dataset(&full, &dir.path().join("other")).unwrap();
        fs::copy(dir.path().join("other/manifest.json"), &manifest).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("count")));

        fs::write(&manifest, "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn split_is_a_partition(n in 2usize..120, seed in any::<u64>()) {
            let ds = split_train_test(toy_dataset(n), 0.75, seed).unwrap();
            let train = ds.indices(Split::Train);
            let test = ds.indices(Split::Test);
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(!train.is_empty() && !test.is_empty());
            let expected = ((0.75 * n as f64).floor() as usize).clamp(1, n - 1);
            prop_assert_eq!(train.len(), expected);
        }
    }
}
