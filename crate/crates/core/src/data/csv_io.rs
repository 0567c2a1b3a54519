use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};

use super::{hours_in_year, MaskProvenance, MeterMetadata, MeterSeries};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvSchema {
    #[default]
    /// `timestamp,<meter_id>,<meter_id>,...`
    Wide,
    /// `meter_id,timestamp,reading`
    Long,
}

impl FromStr for CsvSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wide" => Ok(CsvSchema::Wide),
            "long" => Ok(CsvSchema::Long),
            _ => Err(Error::Config(format!("unknown CSV schema {s:?}, expected wide or long"))),
        }
    }
}

impl fmt::Display for CsvSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CsvSchema::Wide => "wide",
            CsvSchema::Long => "long",
        })
    }
}

const TIMESTAMP_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];

/// Parses an hourly, timezone-naive ISO 8601 timestamp.
pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = s.trim();
    let ts = TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("malformed timestamp {s:?}"))?;
    if ts.minute() != 0 || ts.second() != 0 {
        return Err(format!("timestamp {s:?} is not on the hour"));
    }
    Ok(ts)
}

fn hour_of_year(ts: &NaiveDateTime) -> usize {
    let start = NaiveDate::from_ymd_opt(ts.year(), 1, 1)
        .expect("valid year")
        .and_hms_opt(0, 0, 0)
        .expect("midnight");
    (*ts - start).num_hours() as usize
}

fn parse_reading(cell: &str) -> f64 {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => f64::NAN,
    }
}

struct YearBuf {
    readings: Vec<f64>,
    seen: Vec<bool>,
}

#[derive(Default)]
struct Accumulator {
    order: Vec<String>,
    index: HashMap<String, usize>,
    years: Vec<BTreeMap<i32, YearBuf>>,
}

impl Accumulator {
    fn meter(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.order.len();
        self.order.push(id.to_string());
        self.index.insert(id.to_string(), i);
        self.years.push(BTreeMap::new());
        i
    }

    fn record(&mut self, meter: usize, ts: &NaiveDateTime, value: f64) -> Result<()> {
        let year = ts.year();
        let buf = self.years[meter].entry(year).or_insert_with(|| {
            let n = hours_in_year(year);
            YearBuf {
                readings: vec![f64::NAN; n],
                seen: vec![false; n],
            }
        });
        let h = hour_of_year(ts);
        if buf.seen[h] {
            return Err(Error::Duplicate {
                meter_id: self.order[meter].clone(),
                timestamp: ts.format("%Y-%m-%d %H:%M:%S").to_string(),
            });
        }
        buf.seen[h] = true;
        buf.readings[h] = value;
        Ok(())
    }

    fn finish(self) -> Vec<MeterSeries> {
        let mut out = Vec::new();
        for (id, years) in self.order.into_iter().zip(self.years) {
            for (year, buf) in years {
                let missing_mask = buf.readings.iter().map(|v| v.is_nan()).collect();
                out.push(MeterSeries {
                    meter_id: id.clone(),
                    building_id: String::new(),
                    year,
                    readings: buf.readings,
                    missing_mask,
                    provenance: MaskProvenance::Raw,
                });
            }
        }
        out
    }
}

fn parse_error(path: &Path, record: &csv::StringRecord, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row: record.position().map(|p| p.line()).unwrap_or(0),
        message: message.into(),
    }
}

/// Reads hourly meter readings into one series per meter-year.
///
/// Hours absent from the file and empty or non-numeric cells are marked
/// missing. Building ids are left empty; they come from the metadata table.
pub fn load_meter_csv(path: &Path, schema: CsvSchema) -> Result<Vec<MeterSeries>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut acc = Accumulator::default();
    let mut record = csv::StringRecord::new();
    match schema {
        CsvSchema::Wide => {
            if headers.get(0).map(|h| h.eq_ignore_ascii_case("timestamp")) != Some(true) {
                return Err(Error::Format(format!(
                    "{}: wide schema needs `timestamp` as the first column",
                    path.display()
                )));
            }
            let mut columns = Vec::with_capacity(headers.len() - 1);
            for id in headers.iter().skip(1) {
                if acc.index.contains_key(id) {
                    return Err(Error::Format(format!("{}: meter column {id:?} repeated", path.display())));
                }
                columns.push(acc.meter(id));
            }
            while reader.read_record(&mut record)? {
                let ts = parse_timestamp(&record[0]).map_err(|m| parse_error(path, &record, m))?;
                for (cell, &meter) in record.iter().skip(1).zip(&columns) {
                    acc.record(meter, &ts, parse_reading(cell))?;
                }
            }
        }
        CsvSchema::Long => {
            let col = |name: &str| {
                headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| {
                    Error::Format(format!("{}: long schema is missing column `{name}`", path.display()))
                })
            };
            let (id_col, ts_col, value_col) = (col("meter_id")?, col("timestamp")?, col("reading")?);
            while reader.read_record(&mut record)? {
                let ts = parse_timestamp(&record[ts_col]).map_err(|m| parse_error(path, &record, m))?;
                let meter = acc.meter(&record[id_col]);
                acc.record(meter, &ts, parse_reading(&record[value_col]))?;
            }
        }
    }
    Ok(acc.finish())
}

/// Metadata rows that parsed, plus the ids of rows that were rejected and why.
#[derive(Clone, Debug, Default)]
pub struct MetadataTable {
    pub entries: Vec<MeterMetadata>,
    pub rejected: Vec<(String, String)>,
}

impl MetadataTable {
    pub fn by_id(&self) -> HashMap<&str, &MeterMetadata> {
        self.entries.iter().map(|m| (m.meter_id.as_str(), m)).collect()
    }
}

/// Reads `meter_id,building_id,meter_type,building_type,lat,lng`.
///
/// Rows with categories outside the supported enumerations or without
/// usable coordinates land in `rejected` instead of failing the load.
pub fn load_metadata_csv(path: &Path) -> Result<MetadataTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
            .ok_or_else(|| Error::Format(format!("{}: metadata is missing column `{}`", path.display(), names[0])))
    };
    let cols = [
        col(&["meter_id"])?,
        col(&["building_id"])?,
        col(&["meter_type"])?,
        col(&["building_type"])?,
        col(&["lat", "latitude"])?,
        col(&["lng", "lon", "longitude"])?,
    ];
    let mut table = MetadataTable::default();
    let mut seen = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record[cols[0]].to_string();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(parse_error(path, &record, format!("meter_id {id:?} appears twice")));
        }
        let parsed = (|| -> Result<MeterMetadata> {
            let coord = |i: usize, field: &'static str| {
                record[cols[i]].parse::<f64>().map_err(|_| Error::Encoding {
                    field,
                    value: record[cols[i]].to_string(),
                })
            };
            let m = MeterMetadata {
                meter_id: id.clone(),
                building_id: record[cols[1]].to_string(),
                meter_type: record[cols[2]].parse()?,
                building_type: record[cols[3]].parse()?,
                latitude: coord(4, "latitude")?,
                longitude: coord(5, "longitude")?,
            };
            m.validate()?;
            Ok(m)
        })();
        match parsed {
            Ok(m) => table.entries.push(m),
            Err(e) => table.rejected.push((id, e.to_string())),
        }
    }
    Ok(table)
}

/// Writes series in the long schema, one row per hour from January 1st.
pub fn write_long_csv(path: &Path, series: &[(String, i32, Vec<f32>)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    writeln!(out, "meter_id,timestamp,reading")?;
    for (id, year, values) in series {
        let start = NaiveDate::from_ymd_opt(*year, 1, 1)
            .ok_or_else(|| Error::Config(format!("invalid year {year}")))?
            .and_hms_opt(0, 0, 0)
            .expect("midnight");
        if values.len() > hours_in_year(*year) {
            return Err(Error::Contract(format!("{id}: {} values exceed year {year}", values.len())));
        }
        for (h, v) in values.iter().enumerate() {
            let ts = start + chrono::Duration::hours(h as i64);
            writeln!(out, "{id},{},{v}", ts.format("%Y-%m-%d %H:%M:%S"))?;
        }
    }
    out.flush()?;
    Ok(())
}
