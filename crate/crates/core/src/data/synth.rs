//! A synthetic stand-in for the raw meter corpus.
//!
//! Produces plausible hourly load shapes (daily occupancy, weekly cycle,
//! heating and cooling seasons) with noise, outage gaps and spikes, written in
//! the same CSV layouts the loader reads. Used for tests, demos and desk-scale
//! runs when the real corpus is unavailable.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Timelike, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{hours_in_year, BuildingType, MeterMetadata, MeterSeries, MeterType};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub meters: usize,
    pub years: Vec<i32>,
    pub seed: u64,
    /// Relative standard deviation of hourly noise.
    pub noise: f64,
    /// Probability that an hour carries a spike.
    pub outlier_rate: f64,
    /// Share of meter-years given long outages (most then fail the 5% rule).
    pub gappy_fraction: f64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            meters: 40,
            years: vec![2016, 2017],
            seed: 0,
            noise: 0.06,
            outlier_rate: 5e-4,
            gappy_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub series: Vec<MeterSeries>,
    pub metadata: Vec<MeterMetadata>,
}

const SITES: [(&str, f64, f64); 6] = [
    ("fox", 33.4, -111.9),
    ("bear", 37.9, -122.3),
    ("wolf", 40.0, -75.2),
    ("lynx", 44.9, -93.2),
    ("hare", 29.7, -95.4),
    ("crow", 51.5, -0.1),
];

fn occupancy(b: BuildingType, weekday: Weekday, hour: u32, doy: u32) -> f64 {
    let weekend = matches!(weekday, Weekday::Sat | Weekday::Sun);
    let within = |start: u32, end: u32| if (start..end).contains(&hour) { 1.0 } else { 0.0 };
    match b {
        BuildingType::Office => {
            if weekend {
                0.05
            } else {
                within(8, 18) + 0.4 * within(7, 8) + 0.3 * within(18, 20)
            }
        }
        BuildingType::Education => {
            let term = if (150..235).contains(&doy) || doy > 355 { 0.3 } else { 1.0 };
            if weekend {
                0.1
            } else {
                term * (within(8, 16) + 0.3 * within(16, 21))
            }
        }
        BuildingType::PublicServices => {
            if weekday == Weekday::Sun {
                0.1
            } else {
                within(9, 17) * if weekend { 0.5 } else { 1.0 }
            }
        }
        BuildingType::Entertainment => {
            let evening = within(16, 23) + 0.4 * within(11, 16);
            evening * if weekend { 1.0 } else { 0.7 }
        }
        BuildingType::Lodging => 0.3 + 0.6 * within(6, 9) + 0.8 * within(18, 23),
    }
}

fn meter_year(
    meter_type: MeterType,
    building_type: BuildingType,
    lat: f64,
    base: f64,
    year: i32,
    cfg: &SynthCorpusConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = hours_in_year(year);
    let start = NaiveDate::from_ymd_opt(year, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    let climate = ((lat - 25.0) / 25.0).clamp(0.1, 1.2);
    let mut daily = 0.0;
    let mut out = Vec::with_capacity(n);
    for h in 0..n {
        let ts = start + chrono::Duration::hours(h as i64);
        let doy = ts.ordinal();
        if ts.hour() == 0 {
            // Slowly wandering day-to-day level.
            daily = 0.8 * daily + 0.1 * rng.random::<f64>() - 0.05;
        }
        let season = 2.0 * PI * doy as f64 / 365.0;
        let cool = (season - 2.0 * PI * 200.0 / 365.0).cos().max(0.0) / climate.max(0.5);
        let heat = climate * (season - 2.0 * PI * 15.0 / 365.0).cos().max(0.0);
        let occ = occupancy(building_type, ts.weekday(), ts.hour(), doy);
        let shape = match meter_type {
            MeterType::Electricity => 0.45 + 0.5 * occ + 0.2 * cool,
            MeterType::ChilledWater => 0.08 + cool * (0.4 + 0.6 * occ),
            MeterType::Gas => 0.12 + heat * (0.5 + 0.4 * occ),
            MeterType::HotWater => 0.2 + 0.55 * heat + 0.25 * occ,
            MeterType::Steam => 0.1 + heat * (0.6 + 0.3 * occ),
        };
        let mut v = base * shape * (1.0 + daily + noise.sample(rng)).max(0.0);
        if rng.random::<f64>() < cfg.outlier_rate {
            v *= 8.0 + 4.0 * rng.random::<f64>();
        }
        out.push(v);
    }
    out
}

fn knock_out(values: &mut [f64], rng: &mut ChaCha8Rng, gappy: bool) {
    let n = values.len();
    // A few short dropouts everywhere, plus long outages on gappy meters.
    let runs = rng.random_range(0..4);
    for _ in 0..runs {
        let start = rng.random_range(0..n);
        let len = rng.random_range(1..12);
        values[start..(start + len).min(n)].iter_mut().for_each(|v| *v = f64::NAN);
    }
    if gappy {
        let len = rng.random_range(n / 15..n / 5);
        let start = rng.random_range(0..n - len);
        values[start..start + len].iter_mut().for_each(|v| *v = f64::NAN);
    }
}

pub fn synth_corpus(cfg: &SynthCorpusConfig) -> Result<SynthCorpus> {
    if cfg.meters == 0 || cfg.years.is_empty() {
        return Err(Error::Config("synthetic corpus needs at least one meter and one year".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metadata = Vec::with_capacity(cfg.meters);
    let mut series = Vec::new();
    let mut building = 0;
    while metadata.len() < cfg.meters {
        let (site, lat, lon) = SITES[rng.random_range(0..SITES.len())];
        let building_type = BuildingType::ALL[rng.random_range(0..5)];
        let building_id = format!("{site}_{}_{building:03}", building_type.as_str().to_lowercase().replace(['/', ' '], "_"));
        building += 1;
        let mut types = vec![MeterType::Electricity];
        for t in &MeterType::ALL[1..] {
            if rng.random::<f64>() < 0.3 {
                types.push(*t);
            }
        }
        for meter_type in types {
            if metadata.len() == cfg.meters {
                break;
            }
            let meter_id = format!("{building_id}_{meter_type}");
            let base = 10f64.powf(rng.random_range(1.0..3.0));
            for &year in &cfg.years {
                let mut values = meter_year(meter_type, building_type, lat, base, year, cfg, &mut rng);
                let gappy = rng.random::<f64>() < cfg.gappy_fraction;
                knock_out(&mut values, &mut rng, gappy);
                let mut s = MeterSeries::from_readings(meter_id.clone(), year, values);
                s.building_id = building_id.clone();
                series.push(s);
            }
            metadata.push(MeterMetadata {
                meter_id,
                building_id: building_id.clone(),
                meter_type,
                building_type,
                latitude: lat,
                longitude: lon,
            });
        }
    }
    Ok(SynthCorpus { series, metadata })
}

impl SynthCorpus {
    /// Writes `meters.csv` (wide schema) and `metadata.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut years: Vec<i32> = self.series.iter().map(|s| s.year).collect();
        years.sort_unstable();
        years.dedup();

        let mut w = csv::Writer::from_path(dir.join("meters.csv"))?;
        let ids: Vec<&str> = self.metadata.iter().map(|m| m.meter_id.as_str()).collect();
        w.write_record(std::iter::once("timestamp").chain(ids.iter().copied()))?;
        let mut row = Vec::with_capacity(ids.len() + 1);
        for year in years {
            let cols: Vec<&MeterSeries> = ids
                .iter()
                .map(|id| {
                    self.series
                        .iter()
                        .find(|s| s.meter_id == *id && s.year == year)
                        .ok_or_else(|| Error::Contract(format!("{id} lacks year {year}")))
                })
                .collect::<Result<_>>()?;
            let start = NaiveDate::from_ymd_opt(year, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
            for h in 0..hours_in_year(year) {
                row.clear();
                row.push((start + chrono::Duration::hours(h as i64)).format("%Y-%m-%d %H:%M:%S").to_string());
                for s in &cols {
                    let v = s.readings[h];
                    row.push(if v.is_nan() { String::new() } else { format!("{v:.3}") });
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("metadata.csv"))?;
        w.write_record(["meter_id", "building_id", "meter_type", "building_type", "lat", "lng"])?;
        for m in &self.metadata {
            w.write_record([
                m.meter_id.clone(),
                m.building_id.clone(),
                m.meter_type.to_string(),
                m.building_type.to_string(),
                m.latitude.to_string(),
                m.longitude.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_metadata_csv, load_meter_csv, CsvSchema};

    #[test]
    fn corpus_is_seeded_and_complete() {
        let cfg = SynthCorpusConfig {
            meters: 7,
            years: vec![2017],
            ..Default::default()
        };
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a.metadata, b.metadata);
        assert_eq!(a.series.len(), 7);
        for (x, y) in a.series.iter().zip(&b.series) {
            assert_eq!(x.missing_mask, y.missing_mask);
            assert!(x.readings.iter().zip(&y.readings).all(|(p, q)| p == q || (p.is_nan() && q.is_nan())));
            assert!(x.readings.iter().all(|v| v.is_nan() || *v >= 0.0));
        }
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthCorpusConfig {
            meters: 3,
            years: vec![2016, 2017],
            seed: 4,
            ..Default::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        corpus.write(dir.path()).unwrap();
        let series = load_meter_csv(&dir.path().join("meters.csv"), CsvSchema::Wide).unwrap();
        assert_eq!(series.len(), 6);
        let meta = load_metadata_csv(&dir.path().join("metadata.csv")).unwrap();
        assert_eq!(meta.entries, corpus.metadata);
        let orig = corpus.series.iter().find(|s| s.meter_id == series[0].meter_id && s.year == series[0].year).unwrap();
        assert_eq!(orig.missing_mask, series[0].missing_mask);
        for (a, b) in orig.readings.iter().zip(&series[0].readings) {
            assert!(a.is_nan() && b.is_nan() || (a - b).abs() <= 5e-4);
        }
    }
}
