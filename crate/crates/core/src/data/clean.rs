use std::collections::HashMap;

use super::{MaskProvenance, MeterSeries};
use crate::error::{Error, Result};

pub const DEFAULT_IQR_MULTIPLIER: f64 = 1.5;
pub const DEFAULT_MAX_MISSING: f64 = 0.05;

/// Quantile with linear interpolation between order statistics.
///
/// Reorders `values` in place. Panics on an empty slice.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Tukey fence `[Q1 - k*IQR, Q3 + k*IQR]` over the given values.
pub fn iqr_fence(values: &[f64], k: f64) -> (f64, f64) {
    let mut buf = values.to_vec();
    let q1 = quantile(&mut buf, 0.25);
    let q3 = quantile(&mut buf, 0.75);
    let iqr = q3 - q1;
    (q1 - k * iqr, q3 + k * iqr)
}

/// Marks readings outside the IQR fence as missing, then fills every gap
/// forward and any leading gap backward.
pub fn clean_series(s: &MeterSeries, iqr_multiplier: f64) -> Result<MeterSeries> {
    let present: Vec<f64> = s
        .readings
        .iter()
        .zip(&s.missing_mask)
        .filter(|(_, m)| !**m)
        .map(|(v, _)| *v)
        .collect();
    if present.is_empty() {
        return Err(Error::UnrecoverableSeries(format!("{} ({})", s.meter_id, s.year)));
    }
    if present.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} ({}) has {} readings, cleaning needs at least 4",
            s.meter_id,
            s.year,
            present.len()
        )));
    }
    let (lo, hi) = iqr_fence(&present, iqr_multiplier);
    let mut readings = s.readings.clone();
    let keep: Vec<bool> = readings
        .iter()
        .zip(&s.missing_mask)
        .map(|(v, m)| !*m && *v >= lo && *v <= hi)
        .collect();

    let mut last = None;
    for (v, k) in readings.iter_mut().zip(&keep) {
        if *k {
            last = Some(*v);
        } else if let Some(prev) = last {
            *v = prev;
        }
    }
    // Values inside the fence always exist because Q1 and Q3 lie within it.
    let first = keep.iter().position(|k| *k).expect("fence contains the quartiles");
    let fill = readings[first];
    readings[..first].iter_mut().for_each(|v| *v = fill);

    Ok(MeterSeries {
        meter_id: s.meter_id.clone(),
        building_id: s.building_id.clone(),
        year: s.year,
        missing_mask: vec![false; readings.len()],
        readings,
        provenance: MaskProvenance::Cleaned,
    })
}

/// Keeps series whose raw missing fraction is at most `max_missing_frac`.
///
/// Panics if handed a cleaned series: its mask no longer describes the raw
/// gaps, so filtering it would silently keep everything.
pub fn filter_missing(series: Vec<MeterSeries>, max_missing_frac: f64) -> Vec<MeterSeries> {
    series
        .into_iter()
        .filter(|s| {
            assert_eq!(
                s.provenance,
                MaskProvenance::Raw,
                "filter_missing needs raw masks ({} was already cleaned)",
                s.meter_id
            );
            let allowed = max_missing_frac * s.len() as f64;
            (s.missing_count() as f64) <= allowed + 1e-9
        })
        .collect()
}

/// Reduces each meter to one year: the one with the lower raw missing
/// fraction, the earlier year on ties. Meter order follows first appearance.
pub fn select_year(series: Vec<MeterSeries>) -> Vec<MeterSeries> {
    let mut slots: Vec<MeterSeries> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for s in series {
        match index.get(&s.meter_id) {
            None => {
                index.insert(s.meter_id.clone(), slots.len());
                slots.push(s);
            }
            Some(&i) => {
                let cur = &slots[i];
                let (a, b) = (s.missing_fraction(), cur.missing_fraction());
                if a < b || (a == b && s.year < cur.year) {
                    slots[i] = s;
                }
            }
        }
    }
    slots
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(values: &[Option<f64>]) -> MeterSeries {
        MeterSeries::from_readings("m", 2017, values.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }

    // Independent oracle: full sort, then interpolate.
    fn sorted_quantile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let pos = q * (v.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] * (1.0 - f) + v[i + 1] * f
        } else {
            v[i]
        }
    }

    #[test]
    fn fence_for_q1_10_q3_20() {
        let values = [10.0, 12.0, 100.0, 15.0, 5.0, 20.0, 18.0, 25.0, 10.0];
        assert_eq!(sorted_quantile(&values, 0.25), 10.0);
        assert_eq!(sorted_quantile(&values, 0.75), 20.0);
        assert_eq!(iqr_fence(&values, 1.5), (-5.0, 35.0));

        let cleaned = clean_series(&raw(&values.map(Some)), 1.5).unwrap();
        assert_eq!(cleaned.readings[2], 12.0);
        assert_eq!(cleaned.missing_count(), 0);
        assert_eq!(cleaned.provenance, MaskProvenance::Cleaned);
    }

    #[test]
    fn forward_and_backward_fill() {
        let s = raw(&[Some(1.0), None, Some(3.0), Some(2.0), Some(2.5)]);
        assert_eq!(clean_series(&s, 1.5).unwrap().readings, vec![1.0, 1.0, 3.0, 2.0, 2.5]);
        let s = raw(&[None, Some(2.0), Some(2.0), Some(2.0), Some(2.0)]);
        assert_eq!(clean_series(&s, 1.5).unwrap().readings, vec![2.0; 5]);
    }

    #[test]
    fn all_missing_is_unrecoverable() {
        let s = raw(&[None, None, None]);
        assert!(matches!(clean_series(&s, 1.5), Err(Error::UnrecoverableSeries(_))));
        let s = raw(&[Some(1.0), None, Some(3.0)]);
        assert!(matches!(clean_series(&s, 1.5), Err(Error::InsufficientData(_))));
    }

    fn with_missing(count: usize) -> MeterSeries {
        let mut v = vec![Some(1.0); 8760];
        v.iter_mut().take(count).for_each(|x| *x = None);
        raw(&v)
    }

    #[test]
    fn missing_threshold_is_inclusive() {
        // 6% and exactly 5% of a 2017 year.
        let six = with_missing(526);
        let five = with_missing(438);
        assert_eq!(five.missing_fraction(), 0.05);
        let kept = filter_missing(vec![six, five, with_missing(0)], 0.05);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].missing_count(), 438);
        assert_eq!(kept[1].missing_count(), 0);
    }

    #[test]
    #[should_panic(expected = "raw masks")]
    fn filtering_cleaned_series_panics() {
        let s = clean_series(&with_missing(10), 1.5).unwrap();
        filter_missing(vec![s], 0.05);
    }

    #[test]
    fn year_selection_prefers_complete_then_2016() {
        let mut a16 = with_missing(100);
        a16.year = 2016;
        let a17 = with_missing(50);
        let mut b16 = with_missing(5);
        b16.year = 2016;
        b16.meter_id = "b".into();
        let mut b17 = with_missing(5);
        b17.meter_id = "b".into();
        let picked = select_year(vec![a16, b17, a17, b16]);
        assert_eq!(picked.len(), 2);
        assert_eq!((picked[0].meter_id.as_str(), picked[0].year), ("m", 2017));
        assert_eq!((picked[1].meter_id.as_str(), picked[1].year), ("b", 2016));
    }

    proptest! {
        #[test]
        fn quantile_matches_sort_oracle(values in proptest::collection::vec(-1e6f64..1e6, 1..200), q in 0.0f64..=1.0) {
            let expected = sorted_quantile(&values, q);
            let got = quantile(&mut values.clone(), q);
            prop_assert!((got - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
        }

        #[test]
        fn cleaned_series_has_no_missing(values in proptest::collection::vec(proptest::option::weighted(0.8, -50.0f64..50.0), 4..300)) {
            let s = raw(&values);
            prop_assume!(s.len() - s.missing_count() >= 4);
            let c = clean_series(&s, 1.5).unwrap();
            prop_assert_eq!(c.missing_count(), 0);
            prop_assert!(c.readings.iter().all(|v| v.is_finite()));
            let (lo, hi) = iqr_fence(&values.iter().flatten().copied().collect::<Vec<_>>(), 1.5);
            prop_assert!(c.readings.iter().all(|v| *v >= lo && *v <= hi));
        }
    }
}
