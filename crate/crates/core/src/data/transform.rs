use ndarray::Array2;

use super::{HOURS_PER_WEEK, IMAGE_HOURS, WEEKS};
use crate::error::{Error, Result};

/// A min-max normalized sequence with the bounds needed to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub norm_min: f64,
    pub norm_max: f64,
    pub constant: bool,
}

/// Scales a cleaned series to [-1, 1]. A constant series maps to zeros.
pub fn normalize(values: &[f64]) -> Normalized {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || min >= max {
        let v = if values.is_empty() { 0.0 } else { min };
        return Normalized {
            values: vec![0.0; values.len()],
            norm_min: v,
            norm_max: v,
            constant: true,
        };
    }
    let span = max - min;
    Normalized {
        values: values.iter().map(|&v| (2.0 * (v - min) / span - 1.0).clamp(-1.0, 1.0)).collect(),
        norm_min: min,
        norm_max: max,
        constant: false,
    }
}

/// Maps normalized values back to raw units.
pub fn denormalize(values: &[f64], norm_min: f64, norm_max: f64) -> Vec<f64> {
    let span = norm_max - norm_min;
    values.iter().map(|&v| (v + 1.0) * 0.5 * span + norm_min).collect()
}

/// Lays the first 8736 hours out as 52 weeks by 168 hours, row-major.
pub fn reshape_to_image(values: &[f64]) -> Result<Array2<f32>> {
    if values.len() < IMAGE_HOURS {
        return Err(Error::InsufficientData(format!(
            "{} hourly values, an image needs {IMAGE_HOURS}",
            values.len()
        )));
    }
    let data = values[..IMAGE_HOURS].iter().map(|&v| v as f32).collect();
    Ok(Array2::from_shape_vec((WEEKS, HOURS_PER_WEEK), data).expect("length checked"))
}

pub fn flatten_image(grid: &Array2<f32>) -> Vec<f32> {
    grid.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_map_to_unit_bounds() {
        let n = normalize(&[10.0, 20.0, 30.0]);
        assert_eq!(n.values, vec![-1.0, 0.0, 1.0]);
        assert_eq!((n.norm_min, n.norm_max, n.constant), (10.0, 30.0, false));
    }

    #[test]
    fn constant_series_is_flagged() {
        let n = normalize(&[5.0, 5.0, 5.0]);
        assert_eq!(n.values, vec![0.0; 3]);
        assert!(n.constant);
        assert_eq!(n.norm_min, n.norm_max);
    }

    #[test]
    fn reshape_index_arithmetic() {
        let seq: Vec<f64> = (0..8760).map(|i| i as f64).collect();
        let g = reshape_to_image(&seq).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[1, 0]], 168.0);
        assert_eq!(g[[51, 167]], 8735.0);
        assert!(matches!(reshape_to_image(&seq[..8735]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn leap_year_drops_last_48_hours() {
        let seq: Vec<f64> = (0..8784).map(|i| i as f64).collect();
        let flat = flatten_image(&reshape_to_image(&seq).unwrap());
        assert_eq!(seq.len() - flat.len(), 48);
        assert_eq!(*flat.last().unwrap(), 8735.0);
    }

    proptest! {
        #[test]
        fn round_trip_within_tolerance(values in proptest::collection::vec(-1e4f64..1e4, 2..100)) {
            let n = normalize(&values);
            prop_assume!(!n.constant);
            let back = denormalize(&n.values, n.norm_min, n.norm_max);
            let scale = n.norm_max.abs().max(n.norm_min.abs());
            for (a, b) in back.iter().zip(&values) {
                prop_assert!((a - b).abs() <= 1e-6 * scale.max(1e-12));
            }
            prop_assert!(n.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn normalize_is_strictly_monotone(values in proptest::collection::vec(-1e3f64..1e3, 2..60)) {
            let n = normalize(&values);
            prop_assume!(!n.constant);
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(n.values[i] < n.values[j]);
                    }
                }
            }
        }

        #[test]
        fn flatten_inverts_reshape(extra in 0usize..60, seed in any::<u64>()) {
            let seq: Vec<f64> = (0..IMAGE_HOURS + extra).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
            let flat = flatten_image(&reshape_to_image(&seq).unwrap());
            let expected: Vec<f32> = seq[..IMAGE_HOURS].iter().map(|v| *v as f32).collect();
            prop_assert_eq!(flat, expected);
        }
    }
}
