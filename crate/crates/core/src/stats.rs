//! Report statistics: 1D density curves, pointwise confidence envelopes,
//! and moment tables.

use crate::{PlomError, Result};
use ndarray::{Array1, ArrayView1, ArrayView2};

/// Evaluation grid covering the sample range ± 6 standard deviations.
pub fn density_grid(samples: &[f64], n_points: usize) -> Result<Array1<f64>> {
    if samples.len() < 2 {
        return Err(PlomError::Config("density grid needs at least 2 samples".into()));
    }
    let (mean, std) = mean_std(samples);
    if !(std > 0.0) {
        return Err(PlomError::Degenerate("zero-variance samples".into()));
    }
    let lo = mean - 6.0 * std;
    let hi = mean + 6.0 * std;
    let step = (hi - lo) / (n_points as f64 - 1.0);
    Ok(Array1::from_iter((0..n_points).map(|i| lo + i as f64 * step)))
}

pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// 1D Gaussian KDE with the Silverman bandwidth on an explicit grid.
pub fn scalar_pdf(samples: &[f64], grid: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if samples.len() < 10 {
        return Err(PlomError::Config("scalar_pdf needs at least 10 samples".into()));
    }
    let n = samples.len() as f64;
    let (_, std) = mean_std(samples);
    if !(std > 0.0) {
        return Err(PlomError::Degenerate("zero-variance samples".into()));
    }
    let h = std * (4.0 / (3.0 * n)).powf(0.2);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid.mapv(|x| {
        let mut acc = 0.0;
        for &xi in samples {
            let z = (x - xi) / h;
            acc += (-0.5 * z * z).exp();
        }
        acc * norm
    });
    Ok(density)
}

/// Trapezoid integral of a curve sampled on a uniform or non-uniform grid.
pub fn trapezoid(grid: &ArrayView1<f64>, values: &ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
    }
    acc
}

/// Linear-interpolation quantile of a sorted slice (type-7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pointwise empirical confidence envelope of an ensemble of curves.
///
/// Rows of `ensemble` are realizations, columns are grid points. Returns
/// `(lower, mean, upper)` at levels `(1 ∓ p_c)/2`; `p_c = 0` collapses both
/// envelopes onto the median.
pub fn confidence_envelope(
    ensemble: &ArrayView2<f64>,
    p_c: f64,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    let (n_samples, n_points) = (ensemble.nrows(), ensemble.ncols());
    if n_samples < 50 {
        return Err(PlomError::Config(format!(
            "confidence envelope needs at least 50 realizations, got {n_samples}"
        )));
    }
    if !(0.0..1.0).contains(&p_c) {
        return Err(PlomError::Config("confidence level must lie in [0, 1)".into()));
    }
    let q_lo = (1.0 - p_c) / 2.0;
    let q_hi = (1.0 + p_c) / 2.0;
    let mut lower = Array1::zeros(n_points);
    let mut upper = Array1::zeros(n_points);
    let mut mean = Array1::zeros(n_points);
    let mut buf = vec![0.0; n_samples];
    for p in 0..n_points {
        for (i, v) in ensemble.column(p).iter().enumerate() {
            buf[i] = *v;
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower[p] = quantile_sorted(&buf, q_lo);
        upper[p] = quantile_sorted(&buf, q_hi);
        mean[p] = buf.iter().sum::<f64>() / n_samples as f64;
    }
    Ok((lower, mean, upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normal_samples_recover_phi() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let grid = density_grid(&samples, 301).unwrap();
        let pdf = scalar_pdf(&samples, &grid.view()).unwrap();
        let mut worst = 0.0f64;
        for (x, d) in grid.iter().zip(pdf.iter()) {
            let phi = (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            worst = worst.max((d - phi).abs());
        }
        assert!(worst <= 0.01, "max deviation {worst}");
        let mass = trapezoid(&grid.view(), &pdf.view());
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn two_point_samples_give_symmetric_bimodal_curve() {
        let mut samples = Vec::new();
        for _ in 0..20 {
            samples.push(-1.0);
            samples.push(1.0);
        }
        let n = 101;
        let grid = Array1::from_iter((0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64));
        let pdf = scalar_pdf(&samples, &grid.view()).unwrap();
        for i in 0..n {
            assert!(pdf[i] >= 0.0);
            assert_abs_diff_eq!(pdf[i], pdf[n - 1 - i], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_variance_rejected() {
        let samples = vec![2.0; 50];
        let grid = Array1::linspace(0.0, 4.0, 10);
        assert!(scalar_pdf(&samples, &grid.view()).is_err());
    }

    #[test]
    fn constant_ensemble_envelope_collapses() {
        let ens = Array2::from_elem((60, 5), 3.5);
        let (lo, mean, hi) = confidence_envelope(&ens.view(), 0.9).unwrap();
        for p in 0..5 {
            assert_eq!(lo[p], 3.5);
            assert_eq!(hi[p], 3.5);
            assert_eq!(mean[p], 3.5);
        }
    }

    #[test]
    fn zero_level_envelopes_equal_median() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ens = Array2::from_shape_fn((71, 3), |_| rng.gen::<f64>());
        let (lo, _, hi) = confidence_envelope(&ens.view(), 0.0).unwrap();
        for p in 0..3 {
            assert_abs_diff_eq!(lo[p], hi[p], epsilon = 1e-15);
        }
    }

    #[test]
    fn uniform_order_statistics_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ens = Array2::from_shape_fn((10_000, 2), |_| rng.gen::<f64>());
        let (lo, _, hi) = confidence_envelope(&ens.view(), 0.98).unwrap();
        for p in 0..2 {
            assert!((lo[p] - 0.01).abs() < 0.005, "lower {}", lo[p]);
            assert!((hi[p] - 0.99).abs() < 0.005, "upper {}", hi[p]);
        }
    }
}
