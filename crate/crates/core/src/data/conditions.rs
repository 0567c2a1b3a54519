use serde::{Deserialize, Serialize};

use super::{BuildingType, MeterMetadata, MeterType};
use crate::error::{Error, Result};

pub const CONDITION_DIM: usize = 13;

/// Column names of the condition vector, in order.
pub const CONDITION_LAYOUT: [&str; CONDITION_DIM] = [
    "year",
    "latitude",
    "longitude",
    "meter_type=electricity",
    "meter_type=chilledwater",
    "meter_type=gas",
    "meter_type=hotwater",
    "meter_type=steam",
    "building_type=Office",
    "building_type=Education",
    "building_type=Public services",
    "building_type=Entertainment",
    "building_type=Lodging/residential",
];

const METER_BLOCK: usize = 3;
const BUILDING_BLOCK: usize = 8;

/// Latitude and longitude ranges used to scale coordinates into [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl GeoBounds {
    /// Bounds over the given metadata. A degenerate range (every site at one
    /// coordinate) is widened by half a degree each side so scaling stays
    /// defined.
    pub fn from_metadata<'a>(items: impl IntoIterator<Item = &'a MeterMetadata>) -> Result<Self> {
        let mut b = GeoBounds {
            lat_min: f64::INFINITY,
            lat_max: f64::NEG_INFINITY,
            lon_min: f64::INFINITY,
            lon_max: f64::NEG_INFINITY,
        };
        for m in items {
            b.lat_min = b.lat_min.min(m.latitude);
            b.lat_max = b.lat_max.max(m.latitude);
            b.lon_min = b.lon_min.min(m.longitude);
            b.lon_max = b.lon_max.max(m.longitude);
        }
        if !b.lat_min.is_finite() {
            return Err(Error::NoData("coordinate bounds of an empty metadata set".into()));
        }
        if b.lat_max - b.lat_min < 1e-9 {
            b.lat_min -= 0.5;
            b.lat_max += 0.5;
        }
        if b.lon_max - b.lon_min < 1e-9 {
            b.lon_min -= 0.5;
            b.lon_max += 0.5;
        }
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        if ok(self.lat_min, self.lat_max) && ok(self.lon_min, self.lon_max) {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate coordinate bounds {self:?}")))
        }
    }
}

fn scale(v: f64, lo: f64, hi: f64, field: &'static str) -> Result<f32> {
    let tol = 1e-9 * (hi - lo);
    if !(v >= lo - tol && v <= hi + tol) {
        return Err(Error::Encoding {
            field,
            value: format!("{v} outside dataset range [{lo}, {hi}]"),
        });
    }
    Ok((2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionVector {
    pub values: [f32; CONDITION_DIM],
}

impl ConditionVector {
    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    /// Rebuilds a vector from a stored row, checking the one-hot blocks.
    pub fn from_slice(values: &[f32]) -> Result<Self> {
        let values: [f32; CONDITION_DIM] = values
            .try_into()
            .map_err(|_| Error::Contract(format!("condition has {} values, expected {CONDITION_DIM}", values.len())))?;
        let c = Self { values };
        for block in [METER_BLOCK, BUILDING_BLOCK] {
            let hot = &c.values[block..block + 5];
            if hot.iter().filter(|v| **v == 1.0).count() != 1 || hot.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::Contract(format!("malformed one-hot block {hot:?}")));
            }
        }
        Ok(c)
    }

    pub fn year(&self) -> i32 {
        if self.values[0] < 0.0 {
            2016
        } else {
            2017
        }
    }

    pub fn meter_type(&self) -> MeterType {
        MeterType::ALL[argmax(&self.values[METER_BLOCK..METER_BLOCK + 5])]
    }

    pub fn building_type(&self) -> BuildingType {
        BuildingType::ALL[argmax(&self.values[BUILDING_BLOCK..BUILDING_BLOCK + 5])]
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Encodes metadata as `[year, lat, lon, meter one-hot (5), building one-hot (5)]`.
pub fn encode_conditions(m: &MeterMetadata, year: i32, bounds: &GeoBounds) -> Result<ConditionVector> {
    bounds.validate()?;
    let year_code = match year {
        2016 => -1.0,
        2017 => 1.0,
        other => {
            return Err(Error::Encoding {
                field: "year",
                value: other.to_string(),
            })
        }
    };
    let mut values = [0.0f32; CONDITION_DIM];
    values[0] = year_code;
    values[1] = scale(m.latitude, bounds.lat_min, bounds.lat_max, "latitude")?;
    values[2] = scale(m.longitude, bounds.lon_min, bounds.lon_max, "longitude")?;
    values[METER_BLOCK + m.meter_type.index()] = 1.0;
    values[BUILDING_BLOCK + m.building_type.index()] = 1.0;
    Ok(ConditionVector { values })
}
