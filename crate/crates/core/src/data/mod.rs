//! Raw meter ingestion, cleaning, encoding and the processed dataset container.

mod clean;
mod conditions;
mod csv_io;
pub(crate) mod dataset;
mod pipeline;
mod synth;
mod transform;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clean::{clean_series, filter_missing, iqr_fence, quantile, select_year, DEFAULT_IQR_MULTIPLIER, DEFAULT_MAX_MISSING};
pub use conditions::{encode_conditions, ConditionVector, GeoBounds, CONDITION_DIM, CONDITION_LAYOUT};
pub use csv_io::{load_meter_csv, load_metadata_csv, parse_timestamp, write_long_csv, CsvSchema, MetadataTable};
pub use dataset::{load_dataset, save_dataset, split_train_test, ProcessedDataset, SampleRecord, Split, DATASET_SCHEMA_VERSION};
pub use pipeline::{preprocess, PreprocessOptions, PreprocessSummary};
pub use synth::{synth_corpus, SynthCorpus, SynthCorpusConfig};
pub use transform::{denormalize, flatten_image, normalize, reshape_to_image, Normalized};

pub const WEEKS: usize = 52;
pub const HOURS_PER_WEEK: usize = 168;
pub const IMAGE_HOURS: usize = WEEKS * HOURS_PER_WEEK;

pub fn hours_in_year(year: i32) -> usize {
    if chrono::NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        8784
    } else {
        8760
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeterType {
    #[serde(rename = "electricity")]
    Electricity,
    #[serde(rename = "chilledwater")]
    ChilledWater,
    #[serde(rename = "gas")]
    Gas,
    #[serde(rename = "hotwater")]
    HotWater,
    #[serde(rename = "steam")]
    Steam,
}

impl MeterType {
    pub const ALL: [MeterType; 5] = [
        MeterType::Electricity,
        MeterType::ChilledWater,
        MeterType::Gas,
        MeterType::HotWater,
        MeterType::Steam,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MeterType::Electricity => "electricity",
            MeterType::ChilledWater => "chilledwater",
            MeterType::Gas => "gas",
            MeterType::HotWater => "hotwater",
            MeterType::Steam => "steam",
        }
    }
}

impl fmt::Display for MeterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric() || *c == '/')
        .flat_map(char::to_lowercase)
        .collect()
}

impl FromStr for MeterType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match squash(s).as_str() {
            "electricity" => Ok(MeterType::Electricity),
            "chilledwater" => Ok(MeterType::ChilledWater),
            "gas" => Ok(MeterType::Gas),
            "hotwater" => Ok(MeterType::HotWater),
            "steam" => Ok(MeterType::Steam),
            _ => Err(Error::Encoding {
                field: "meter_type",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BuildingType {
    #[serde(rename = "Office")]
    Office,
    #[serde(rename = "Education")]
    Education,
    #[serde(rename = "Public services")]
    PublicServices,
    #[serde(rename = "Entertainment")]
    Entertainment,
    #[serde(rename = "Lodging/residential")]
    Lodging,
}

impl BuildingType {
    pub const ALL: [BuildingType; 5] = [
        BuildingType::Office,
        BuildingType::Education,
        BuildingType::PublicServices,
        BuildingType::Entertainment,
        BuildingType::Lodging,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BuildingType::Office => "Office",
            BuildingType::Education => "Education",
            BuildingType::PublicServices => "Public services",
            BuildingType::Entertainment => "Entertainment",
            BuildingType::Lodging => "Lodging/residential",
        }
    }
}

impl fmt::Display for BuildingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuildingType {
    type Err = Error;

    // Accepts the raw corpus spelling "Entertainment/public assembly" as well.
    fn from_str(s: &str) -> Result<Self> {
        match squash(s).as_str() {
            "office" => Ok(BuildingType::Office),
            "education" => Ok(BuildingType::Education),
            "publicservices" => Ok(BuildingType::PublicServices),
            "entertainment" | "entertainment/publicassembly" => Ok(BuildingType::Entertainment),
            "lodging/residential" | "lodging" | "residential" => Ok(BuildingType::Lodging),
            _ => Err(Error::Encoding {
                field: "building_type",
                value: s.to_string(),
            }),
        }
    }
}

/// Whether a series' missing mask still reflects the raw file or has been
/// rewritten by cleaning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskProvenance {
    Raw,
    Cleaned,
}

/// One meter-year of hourly readings. Missing cells hold `f64::NAN`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeterSeries {
    pub meter_id: String,
    pub building_id: String,
    pub year: i32,
    pub readings: Vec<f64>,
    pub missing_mask: Vec<bool>,
    pub provenance: MaskProvenance,
}

impl MeterSeries {
    /// Builds a raw series; non-finite readings are treated as missing.
    pub fn from_readings(meter_id: impl Into<String>, year: i32, readings: Vec<f64>) -> Self {
        let missing_mask = readings.iter().map(|v| !v.is_finite()).collect();
        let readings = readings.into_iter().map(|v| if v.is_finite() { v } else { f64::NAN }).collect();
        Self {
            meter_id: meter_id.into(),
            building_id: String::new(),
            year,
            readings,
            missing_mask,
            provenance: MaskProvenance::Raw,
        }
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.missing_mask.iter().filter(|m| **m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.readings.is_empty() {
            return 1.0;
        }
        self.missing_count() as f64 / self.readings.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterMetadata {
    pub meter_id: String,
    pub building_id: String,
    pub meter_type: MeterType,
    pub building_type: BuildingType,
    pub latitude: f64,
    pub longitude: f64,
}

impl MeterMetadata {
    pub fn validate(&self) -> Result<()> {
        if !(self.latitude.is_finite() && (-90.0..=90.0).contains(&self.latitude)) {
            return Err(Error::Encoding {
                field: "latitude",
                value: self.latitude.to_string(),
            });
        }
        if !(self.longitude.is_finite() && (-180.0..=180.0).contains(&self.longitude)) {
            return Err(Error::Encoding {
                field: "longitude",
                value: self.longitude.to_string(),
            });
        }
        Ok(())
    }
}
