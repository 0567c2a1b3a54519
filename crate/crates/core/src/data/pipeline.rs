use std::collections::HashSet;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clean_series, encode_conditions, filter_missing, normalize, reshape_to_image, select_year, split_train_test, GeoBounds,
    MeterSeries, MetadataTable, ProcessedDataset, SampleRecord, CONDITION_DIM, DEFAULT_IQR_MULTIPLIER, DEFAULT_MAX_MISSING,
    HOURS_PER_WEEK, WEEKS,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub iqr_multiplier: f64,
    pub max_missing_frac: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Keep a seeded random subset of this many meters after filtering.
    pub subsample_meters: Option<usize>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            iqr_multiplier: DEFAULT_IQR_MULTIPLIER,
            max_missing_frac: DEFAULT_MAX_MISSING,
            train_fraction: 0.75,
            split_seed: 0,
            subsample_meters: None,
        }
    }
}

/// Counts of what happened to the input during preprocessing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub input_series: usize,
    pub unsupported_year: usize,
    pub without_metadata: usize,
    pub metadata_rejected: usize,
    pub meters_considered: usize,
    pub dropped_missing: usize,
    pub dropped_unusable: usize,
    pub retained: usize,
    pub train: usize,
    pub test: usize,
}

/// Runs the full raw-to-dataset path: year selection, missing-data filter,
/// IQR cleaning, normalization, reshaping, condition encoding and the split.
///
/// Series whose meter has no (valid) metadata row are skipped with a warning.
pub fn preprocess(
    series: Vec<MeterSeries>,
    metadata: &MetadataTable,
    opts: &PreprocessOptions,
) -> Result<(ProcessedDataset, PreprocessSummary)> {
    let mut summary = PreprocessSummary {
        input_series: series.len(),
        metadata_rejected: metadata.rejected.len(),
        ..Default::default()
    };
    for (id, reason) in &metadata.rejected {
        log::warn!("skipping meter {id}: {reason}");
    }
    let by_id = metadata.by_id();
    let mut usable = Vec::with_capacity(series.len());
    let mut unlisted = HashSet::new();
    for mut s in series {
        if !(2016..=2017).contains(&s.year) {
            summary.unsupported_year += 1;
            continue;
        }
        match by_id.get(s.meter_id.as_str()) {
            Some(m) => {
                s.building_id = m.building_id.clone();
                usable.push(s);
            }
            None => {
                summary.without_metadata += 1;
                unlisted.insert(s.meter_id.clone());
            }
        }
    }
    if !unlisted.is_empty() {
        log::warn!("{} meters have no usable metadata and were skipped", unlisted.len());
    }

    let selected = select_year(usable);
    summary.meters_considered = selected.len();
    let kept = filter_missing(selected, opts.max_missing_frac);
    summary.dropped_missing = summary.meters_considered - kept.len();

    let mut cleaned = Vec::with_capacity(kept.len());
    for s in &kept {
        match clean_series(s, opts.iqr_multiplier) {
            Ok(c) => cleaned.push(c),
            Err(e) => {
                log::warn!("dropping {}: {e}", s.meter_id);
                summary.dropped_unusable += 1;
            }
        }
    }

    if let Some(k) = opts.subsample_meters {
        if k < cleaned.len() {
            let mut order: Vec<usize> = (0..cleaned.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.split_seed ^ 0x5eed_5eed));
            let mut keep: Vec<usize> = order[..k].to_vec();
            keep.sort_unstable();
            let mut slots: Vec<Option<MeterSeries>> = cleaned.into_iter().map(Some).collect();
            cleaned = keep.iter().map(|&i| slots[i].take().expect("unique index")).collect();
        }
    }
    if cleaned.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} meters survived preprocessing, at least 2 are needed",
            cleaned.len()
        )));
    }

    let metas: Vec<_> = cleaned.iter().map(|s| by_id[s.meter_id.as_str()]).collect();
    let bounds = GeoBounds::from_metadata(metas.iter().copied())?;
    let n = cleaned.len();
    let mut images = Array3::zeros((n, WEEKS, HOURS_PER_WEEK));
    let mut conditions = Array2::zeros((n, CONDITION_DIM));
    let mut records = Vec::with_capacity(n);
    for (i, (s, m)) in cleaned.iter().zip(&metas).enumerate() {
        let norm = normalize(&s.readings);
        images.index_axis_mut(Axis(0), i).assign(&reshape_to_image(&norm.values)?);
        let c = encode_conditions(m, s.year, &bounds)?;
        conditions.row_mut(i).assign(&ndarray::ArrayView1::from(&c.values[..]));
        records.push(SampleRecord {
            meter_id: s.meter_id.clone(),
            building_id: m.building_id.clone(),
            year: s.year,
            meter_type: m.meter_type,
            building_type: m.building_type,
            latitude: m.latitude,
            longitude: m.longitude,
            norm_min: norm.norm_min,
            norm_max: norm.norm_max,
            constant: norm.constant,
        });
    }
    let ds = ProcessedDataset::new(images, conditions, records, bounds)?;
    let ds = split_train_test(ds, opts.train_fraction, opts.split_seed)?;
    summary.retained = n;
    summary.train = ds.indices(super::Split::Train).len();
    summary.test = n - summary.train;
    Ok((ds, summary))
}
