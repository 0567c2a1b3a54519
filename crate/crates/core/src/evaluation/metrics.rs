use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Histogram settings for [`compute_kl_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlOptions {
    pub bins: usize,
    pub range: (f64, f64),
    pub epsilon: f64,
}

impl Default for KlOptions {
    fn default() -> Self {
        Self { bins: 100, range: (-1.0, 1.0), epsilon: 1e-8 }
    }
}

const RIDGE: f64 = 1e-6;

fn moments(features: ArrayView2<f64>, ridge: bool) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = features.dim();
    let m = DMatrix::from_fn(n, d, |i, j| features[[i, j]]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centered = m;
    for j in 0..d {
        let mu = mean[j];
        centered.column_mut(j).iter_mut().for_each(|x| *x -= mu);
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if ridge {
        for j in 0..d {
            cov[(j, j)] += RIDGE;
        }
    }
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Trace of the square root of `a * b` for symmetric PSD `a` and `b`,
/// computed from the symmetric product `sqrt(a) b sqrt(a)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrt_psd(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// When either set has fewer than `d + 1` rows the covariances are singular,
/// so both get a small ridge on the diagonal.
pub fn compute_fid(real: ArrayView2<f64>, synthetic: ArrayView2<f64>) -> Result<f64> {
    let (nr, d) = real.dim();
    let (ns, ds) = synthetic.dim();
    if d != ds {
        return Err(Error::Contract(format!("feature widths differ: {d} vs {ds}")));
    }
    if nr < 2 || ns < 2 {
        return Err(Error::InsufficientData(format!("FID needs at least 2 samples per set, got {nr} and {ns}")));
    }
    if !real.iter().chain(synthetic.iter()).all(|v| v.is_finite()) {
        return Err(Error::Contract("non-finite feature values".into()));
    }
    let ridge = nr < d + 1 || ns < d + 1;
    let (mr, cr) = moments(real, ridge);
    let (ms, cs) = moments(synthetic, ridge);
    let diff = (&mr - &ms).norm_squared();
    let tr = cr.trace() + cs.trace() - 2.0 * trace_sqrt_product(&cr, &cs);
    Ok((diff + tr).max(0.0))
}

fn histogram(values: &[f32], opts: &KlOptions) -> Vec<f64> {
    let (lo, hi) = opts.range;
    let width = (hi - lo) / opts.bins as f64;
    let mut counts = vec![0.0; opts.bins];
    for &v in values {
        let idx = ((v as f64 - lo) / width).floor();
        let idx = if idx.is_nan() { 0 } else { (idx.max(0.0) as usize).min(opts.bins - 1) };
        counts[idx] += 1.0;
    }
    let n = values.len() as f64;
    let mut p: Vec<f64> = counts.iter().map(|c| c / n + opts.epsilon).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// KL(real || synthetic) between histograms of the pooled values.
pub fn compute_kl_with(real: &[f32], synthetic: &[f32], opts: &KlOptions) -> Result<f64> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::InsufficientData("KL divergence of an empty sample".into()));
    }
    if opts.bins == 0 || opts.range.1 <= opts.range.0 || opts.epsilon <= 0.0 {
        return Err(Error::Config(format!("bad histogram options {opts:?}")));
    }
    let p = histogram(real, opts);
    let q = histogram(synthetic, opts);
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

pub fn compute_kl(real: &[f32], synthetic: &[f32]) -> Result<f64> {
    compute_kl_with(real, synthetic, &KlOptions::default())
}

/// Pooled RMSE and coefficient of determination over paired values.
///
/// A constant real sample has no variance to explain; R² is then 1 for a
/// perfect match and 0 otherwise.
pub fn compute_rmse_r2(real: &[f32], synthetic: &[f32]) -> Result<(f64, f64)> {
    if real.len() != synthetic.len() {
        return Err(Error::Contract(format!("{} real values vs {} synthetic", real.len(), synthetic.len())));
    }
    if real.is_empty() {
        return Err(Error::InsufficientData("RMSE of an empty sample".into()));
    }
    let n = real.len() as f64;
    let mean = real.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&r, &s) in real.iter().zip(synthetic) {
        ss_res += (r as f64 - s as f64).powi(2);
        ss_tot += (r as f64 - mean).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(((ss_res / n).sqrt(), r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, scale: &[f64], shift: &[f64], seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |(_, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale[j] + shift[j]
        })
    }

    #[test]
    fn fid_matches_closed_form_for_diagonal_gaussians() {
        // Independent oracle: for diagonal covariances the trace term reduces
        // to a sum over (s_r - s_s)^2 per dimension.
        let (sr, ss): ([f64; 4], [f64; 4]) = ([1.0, 2.0, 0.5, 1.5], [1.5, 1.0, 0.5, 3.0]);
        let (mr, ms): ([f64; 4], [f64; 4]) = ([0.0, 1.0, -1.0, 2.0], [1.0, 1.0, 0.0, 0.0]);
        let expected: f64 = (0..4).map(|j| (mr[j] - ms[j]).powi(2) + (sr[j] - ss[j]).powi(2)).sum();
        let a = gaussian(50_000, 4, &sr, &mr, 1);
        let b = gaussian(50_000, 4, &ss, &ms, 2);
        let fid = compute_fid(a.view(), b.view()).unwrap();
        assert!((fid - expected).abs() / expected < 0.02, "fid {fid} expected {expected}");
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let a = gaussian(200, 8, &[1.0; 8], &[0.0; 8], 3);
        let b = gaussian(150, 8, &[2.0; 8], &[0.5; 8], 4);
        assert!(compute_fid(a.view(), a.view()).unwrap().abs() < 1e-6);
        let ab = compute_fid(a.view(), b.view()).unwrap();
        let ba = compute_fid(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-8 * ab.max(1.0), "{ab} vs {ba}");
    }

    #[test]
    fn fid_small_sample_paths() {
        let a = gaussian(5, 64, &[1.0; 64], &[0.0; 64], 5);
        let b = gaussian(6, 64, &[1.0; 64], &[0.0; 64], 6);
        let fid = compute_fid(a.view(), b.view()).unwrap();
        assert!(fid.is_finite() && fid >= 0.0);
        let one = gaussian(1, 64, &[1.0; 64], &[0.0; 64], 7);
        assert!(matches!(compute_fid(one.view(), b.view()), Err(Error::InsufficientData(_))));
        let narrow = gaussian(6, 3, &[1.0; 3], &[0.0; 3], 8);
        assert!(matches!(compute_fid(narrow.view(), b.view()), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_two_bin_example() {
        let opts = KlOptions { bins: 2, range: (-1.0, 1.0), epsilon: 1e-8 };
        let real = [-0.5f32, -0.5, -0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let synth = [-0.5f32, -0.5, -0.5, -0.5, -0.5, -0.5, -0.5, -0.5, -0.5, 0.5];
        let kl = compute_kl_with(&real, &synth, &opts).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - oracle).abs() < 1e-6);
        assert!((kl - 0.5108).abs() < 1e-4);
        let reverse = compute_kl_with(&synth, &real, &opts).unwrap();
        assert!((reverse - kl).abs() > 0.1);
    }

    #[test]
    fn kl_edges_and_disjoint_support() {
        let kl = compute_kl(&[1.0, -1.0, 0.0], &[1.0, -1.0, 0.0]).unwrap();
        assert!(kl.abs() < 1e-12);
        let disjoint = compute_kl(&[-0.9; 10], &[0.9; 10]).unwrap();
        assert!(disjoint.is_finite() && disjoint > 10.0);
    }

    #[test]
    fn rmse_r2_match_hand_computation() {
        let (rmse, r2) = compute_rmse_r2(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!((rmse - 0.5).abs() < 1e-12);
        assert!((r2 - (1.0 - 1.0 / 5.0)).abs() < 1e-12);
        assert_eq!(compute_rmse_r2(&[2.0; 3], &[2.0; 3]).unwrap(), (0.0, 1.0));
        assert!(compute_rmse_r2(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_r2_reference_points() {
        // Predicting the pooled mean everywhere explains nothing.
        let (_, r2) = compute_rmse_r2(&[-1.0, 0.0, 0.5, 0.5], &[0.0; 4]).unwrap();
        assert!(r2.abs() < 1e-12);
        let (rmse, _) = compute_rmse_r2(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((rmse - 1.0).abs() < 1e-12);
        // Constant real data with an imperfect match.
        assert_eq!(compute_rmse_r2(&[1.0, 1.0], &[0.0, 0.0]).unwrap().1, 0.0);
    }

    #[test]
    fn fid_ignores_row_order() {
        let a = gaussian(300, 6, &[1.0; 6], &[0.0; 6], 9);
        let b = gaussian(250, 6, &[1.5; 6], &[0.2; 6], 10);
        let mut rows: Vec<usize> = (0..300).collect();
        rows.reverse();
        rows.rotate_left(17);
        let shuffled = a.select(ndarray::Axis(0), &rows);
        let x = compute_fid(a.view(), b.view()).unwrap();
        let y = compute_fid(shuffled.view(), b.view()).unwrap();
        assert!((x - y).abs() < 1e-9 * x.max(1.0), "{x} vs {y}");
    }

    proptest! {
        #[test]
        fn rmse_r2_invariant_under_joint_permutation(
            pairs in prop::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 2..40),
            rot in 0usize..40,
        ) {
            let (r, s): (Vec<f32>, Vec<f32>) = pairs.iter().cloned().unzip();
            let k = rot % pairs.len();
            let mut rp = r.clone();
            let mut sp = s.clone();
            rp.rotate_left(k);
            sp.rotate_left(k);
            rp.reverse();
            sp.reverse();
            let a = compute_rmse_r2(&r, &s).unwrap();
            let b = compute_rmse_r2(&rp, &sp).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-9);
            prop_assert!((a.1 - b.1).abs() < 1e-9 || (a.1.is_nan() && b.1.is_nan()));
        }

        #[test]
        fn kl_is_nonnegative(
            a in prop::collection::vec(-1.5f32..1.5, 1..60),
            b in prop::collection::vec(-1.5f32..1.5, 1..60),
        ) {
            let kl = compute_kl(&a, &b).unwrap();
            prop_assert!(kl.is_finite() && kl >= 0.0);
        }
    }
}
