//! Diffusion-maps reduced basis on the training latent cloud.
//!
//! The ISDE is projected on the leading right eigenvectors of the Markov
//! transition matrix built from a Gaussian kernel on the latent samples,
//! which preserves the concentration of the sampled measure on the data
//! manifold.

use crate::linalg;
use crate::{PlomError, Result};
use ndarray::{Array1, Array2, ArrayView2};

/// Tie tolerance for the strict eigenvalue ordering check.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DiffusionBasis {
    pub eps_diff: f64,
    /// Right-eigenvector basis `[g]`, `N_d x m`, normalized `g^T b g = I`.
    pub g: Array2<f64>,
    /// Companion `[a] = [g]([g]^T[g])^{-1}`, the right inverse of `g^T`.
    pub a: Array2<f64>,
    /// Transition-matrix eigenvalues, `1 = κ_1 > κ_2 > ... > κ_m > 0`.
    pub kappa: Array1<f64>,
    /// Row sums of the kernel matrix (the diagonal of `[b]`).
    pub b_diag: Array1<f64>,
}

impl DiffusionBasis {
    pub fn n_d(&self) -> usize {
        self.g.nrows()
    }

    pub fn m(&self) -> usize {
        self.g.ncols()
    }

    /// Identity basis (no projection): `g = a = I`, the ISDE integrated in
    /// the full `N_d`-column space.
    ///
    /// Appropriate for single-sample runs and for dense sample clouds whose
    /// kernels overlap into a near-continuum; the projected chain preserves
    /// the sampled measure when the training points are few enough that
    /// their kernels stay separated, which is the regime the reduction is
    /// built for.
    pub fn without_projection(n_d: usize) -> Self {
        DiffusionBasis {
            eps_diff: f64::NAN,
            g: Array2::eye(n_d),
            a: Array2::eye(n_d),
            kappa: Array1::ones(n_d),
            b_diag: Array1::ones(n_d),
        }
    }
}

/// Median pairwise squared distance / 2, the default smoothing parameter.
pub fn default_eps_diff(eta_d: &ArrayView2<f64>) -> f64 {
    let n_d = eta_d.ncols();
    let mut d2 = Vec::with_capacity(n_d * (n_d - 1) / 2);
    for l in 0..n_d {
        for l2 in (l + 1)..n_d {
            let mut acc = 0.0;
            for (a, b) in eta_d.column(l).iter().zip(eta_d.column(l2).iter()) {
                let d = a - b;
                acc += d * d;
            }
            d2.push(acc);
        }
    }
    d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if d2.is_empty() {
        1.0
    } else if d2.len() % 2 == 1 {
        d2[d2.len() / 2]
    } else {
        0.5 * (d2[d2.len() / 2 - 1] + d2[d2.len() / 2])
    };
    (median / 2.0).max(f64::MIN_POSITIVE)
}

/// Kernel matrix `K_{ll'} = exp{-||η^l - η^l'||² / (4 eps)}`.
fn kernel_matrix(eta_d: &ArrayView2<f64>, eps_diff: f64) -> Array2<f64> {
    let n_d = eta_d.ncols();
    let mut k = Array2::zeros((n_d, n_d));
    for l in 0..n_d {
        k[[l, l]] = 1.0;
        for l2 in (l + 1)..n_d {
            let mut d2 = 0.0;
            for (a, b) in eta_d.column(l).iter().zip(eta_d.column(l2).iter()) {
                let d = a - b;
                d2 += d * d;
            }
            let v = (-d2 / (4.0 * eps_diff)).exp();
            k[[l, l2]] = v;
            k[[l2, l]] = v;
        }
    }
    k
}

/// Full eigenvalue spectrum of the symmetrized transition problem, without
/// the strict-ordering checks of the basis itself. Used to pick `m`.
pub fn diffusion_spectrum(eta_d: &ArrayView2<f64>, eps_diff: f64) -> Result<Array1<f64>> {
    if !(eps_diff > 0.0) {
        return Err(PlomError::Config("eps_diff must be positive".into()));
    }
    let k = kernel_matrix(eta_d, eps_diff);
    let b_diag = k.sum_axis(ndarray::Axis(1));
    let b_isqrt = b_diag.mapv(|v| 1.0 / v.sqrt());
    let n_d = eta_d.ncols();
    let mut sym = k;
    for i in 0..n_d {
        for j in 0..n_d {
            sym[[i, j]] *= b_isqrt[i] * b_isqrt[j];
        }
    }
    let (kappa, _) = linalg::sym_eig_desc(&sym.view())?;
    Ok(kappa)
}

/// Build the diffusion-maps basis of dimension `m` on the latent cloud.
///
/// Solves the symmetrized problem `b^{-1/2} K b^{-1/2} γ = κ γ` with
/// orthonormal `γ` and maps back `g = b^{-1/2} γ`, so that `g^T b g = I`.
pub fn build_diffusion_basis(
    eta_d: &ArrayView2<f64>,
    eps_diff: f64,
    m: usize,
) -> Result<DiffusionBasis> {
    let n_d = eta_d.ncols();
    if n_d < 2 {
        return Err(PlomError::Config("diffusion basis needs N_d >= 2".into()));
    }
    if m <= 1 || m > n_d {
        return Err(PlomError::Config(format!(
            "diffusion basis dimension must satisfy 1 < m <= N_d, got m={m}, N_d={n_d}"
        )));
    }
    if !(eps_diff > 0.0) {
        return Err(PlomError::Config("eps_diff must be positive".into()));
    }

    let k = kernel_matrix(eta_d, eps_diff);
    let b_diag = k.sum_axis(ndarray::Axis(1));
    let b_isqrt = b_diag.mapv(|v| 1.0 / v.sqrt());
    let mut sym = k;
    for i in 0..n_d {
        for j in 0..n_d {
            sym[[i, j]] *= b_isqrt[i] * b_isqrt[j];
        }
    }
    let (kappa_all, gamma_all) = linalg::sym_eig_desc(&sym.view())?;

    // strict ordering with a tie tolerance; duplicated latent points collapse
    // eigenvalues and make the requested basis rank-deficient
    for w in kappa_all.iter().take(m).collect::<Vec<_>>().windows(2) {
        if (w[0] - w[1]).abs() <= TIE_EPS * w[0].abs().max(1.0) {
            return Err(PlomError::Diagnostics(format!(
                "diffusion eigenvalues tied within {TIE_EPS:.0e}: {} vs {}",
                w[0], w[1]
            )));
        }
    }
    if kappa_all[m - 1] <= TIE_EPS * kappa_all[0].max(1.0) {
        return Err(PlomError::Diagnostics(format!(
            "requested m={m} exceeds the numerically positive part of the diffusion spectrum \
             (kappa_{m} = {:.3e}); duplicate latent points collapse the kernel rank",
            kappa_all[m - 1]
        )));
    }

    let mut g = Array2::zeros((n_d, m));
    for a in 0..m {
        for i in 0..n_d {
            g[[i, a]] = b_isqrt[i] * gamma_all[[i, a]];
        }
    }
    linalg::fix_column_signs(&mut g);

    // a = g (g^T g)^{-1}
    let gtg = g.t().dot(&g);
    let mut a_mat = Array2::zeros((n_d, m));
    for (i, row) in g.rows().into_iter().enumerate() {
        let sol = linalg::solve_spd(&gtg.view(), &row)?;
        a_mat.row_mut(i).assign(&sol);
    }

    let kappa = Array1::from_iter(kappa_all.iter().take(m).copied());
    Ok(DiffusionBasis {
        eps_diff,
        g,
        a: a_mat,
        kappa,
        b_diag,
    })
}

/// Smallest basis dimension `m >= 3` whose spectrum has decayed below
/// `threshold` relative to `κ_2`, else `N_d`.
pub fn suggest_m(kappa: &Array1<f64>, threshold: f64) -> usize {
    let n_d = kappa.len();
    if n_d < 4 {
        return n_d;
    }
    for m in 3..n_d {
        if kappa[m] / kappa[1] < threshold {
            log::info!("diffusion basis dimension m = {m} (kappa_{}/kappa_2 = {:.3e})", m + 1, kappa[m] / kappa[1]);
            return m;
        }
    }
    n_d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cloud(nu: usize, n_d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((nu, n_d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn kappa_one_with_constant_first_vector() {
        let eta = cloud(3, 12, 1);
        let basis = build_diffusion_basis(&eta.view(), 1.0, 6).unwrap();
        assert_abs_diff_eq!(basis.kappa[0], 1.0, epsilon = 1e-10);
        let g1 = basis.g.column(0);
        let first = g1[0];
        for &v in g1.iter() {
            assert_abs_diff_eq!(v, first, epsilon = 1e-10 * first.abs());
        }
    }

    #[test]
    fn transition_rows_sum_to_one_at_huge_eps() {
        let eta = cloud(2, 5, 2);
        let k = kernel_matrix(&eta.view(), 1e9);
        let b = k.sum_axis(ndarray::Axis(1));
        for i in 0..5 {
            let row_sum: f64 = (0..5).map(|j| k[[i, j]] / b[i]).sum();
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_dense_right_eigenproblem_oracle() {
        let eta = cloud(2, 6, 3);
        let eps = 0.8;
        let basis = build_diffusion_basis(&eta.view(), eps, 6).unwrap();
        // oracle: eigen of the nonsymmetric P = b^{-1} K through nalgebra's
        // general eigenvalue path on the similarity-transformed matrix is
        // what we already do; instead verify the defining relations directly:
        // P g = g diag(kappa)
        let k = kernel_matrix(&eta.view(), eps);
        let b = k.sum_axis(ndarray::Axis(1));
        let mut p = k;
        for i in 0..6 {
            for j in 0..6 {
                p[[i, j]] /= b[i];
            }
        }
        let pg = p.dot(&basis.g);
        for a in 0..6 {
            for i in 0..6 {
                assert_abs_diff_eq!(pg[[i, a]], basis.kappa[a] * basis.g[[i, a]], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn normalization_and_right_inverse() {
        let eta = cloud(3, 10, 4);
        let basis = build_diffusion_basis(&eta.view(), 2.0, 5).unwrap();
        // g^T b g = I
        let mut gtbg = Array2::zeros((5, 5));
        for a in 0..5 {
            for c in 0..5 {
                let mut acc = 0.0;
                for i in 0..10 {
                    acc += basis.g[[i, a]] * basis.b_diag[i] * basis.g[[i, c]];
                }
                gtbg[[a, c]] = acc;
            }
        }
        for a in 0..5 {
            for c in 0..5 {
                let t = if a == c { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gtbg[[a, c]], t, epsilon = 1e-8);
            }
        }
        // g^T a = I
        let gta = basis.g.t().dot(&basis.a);
        for a in 0..5 {
            for c in 0..5 {
                let t = if a == c { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gta[[a, c]], t, epsilon = 1e-10);
            }
        }
        // projection idempotence: (z g^T) a = z
        let z = cloud(3, 5, 9);
        let zr = z.dot(&basis.g.t()).dot(&basis.a);
        for (x, y) in z.iter().zip(zr.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn permutation_invariance_of_spectrum() {
        let eta = cloud(2, 8, 5);
        let b1 = build_diffusion_basis(&eta.view(), 1.5, 4).unwrap();
        let mut perm = eta.clone();
        // swap two columns
        let c0 = eta.column(1).to_owned();
        let c1 = eta.column(6).to_owned();
        perm.column_mut(1).assign(&c1);
        perm.column_mut(6).assign(&c0);
        let b2 = build_diffusion_basis(&perm.view(), 1.5, 4).unwrap();
        for (x, y) in b1.kappa.iter().zip(b2.kappa.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn duplicate_points_trigger_diagnostics() {
        let mut eta = cloud(2, 6, 7);
        let c = eta.column(0).to_owned();
        eta.column_mut(1).assign(&c);
        // duplicated points collapse part of the spectrum; either a tie or a
        // nonpositive tail must be reported when requesting full rank
        let res = build_diffusion_basis(&eta.view(), 1.0, 6);
        assert!(res.is_err());
    }

    #[test]
    fn suggest_m_threshold_rule() {
        let kappa = Array1::from_vec(vec![1.0, 0.9, 0.5, 0.04, 0.03]);
        assert_eq!(suggest_m(&kappa, 0.1), 3);
        let flat = Array1::from_elem(5, 1.0);
        assert_eq!(suggest_m(&flat, 0.1), 5);
    }
}
