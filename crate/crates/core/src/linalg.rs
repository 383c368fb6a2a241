//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Everything here operates on matrices of side at most a few hundred
//! (Gram matrices, covariance matrices, Newton systems); large state
//! arrays stay in ndarray and never pass through these routines.

use crate::{PlomError, Result};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

pub fn to_nalgebra(a: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Flip each column so its largest-magnitude entry is positive.
///
/// Makes eigen/singular vector output reproducible across platforms.
pub fn fix_column_signs(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending,
/// eigenvector columns sign-fixed.
pub fn sym_eig_desc(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(PlomError::Shape(format!(
            "sym_eig_desc expects a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let m = to_nalgebra(a);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut vals = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    for (k, &idx) in order.iter().enumerate() {
        vals[k] = eig.eigenvalues[idx];
        for i in 0..n {
            vecs[[i, k]] = eig.eigenvectors[(i, idx)];
        }
    }
    fix_column_signs(&mut vecs);
    Ok((vals, vecs))
}

/// Solve the symmetric positive-definite system `a x = b`.
pub fn solve_spd(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let m = to_nalgebra(a);
    let rhs = DVector::from_iterator(b.len(), b.iter().copied());
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| PlomError::Degenerate("matrix not positive definite in solve_spd".into()))?;
    let x = chol.solve(&rhs);
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Solve a general square system `a x = b` by LU with partial pivoting.
pub fn solve_lu(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let m = to_nalgebra(a);
    let rhs = DVector::from_iterator(b.len(), b.iter().copied());
    let lu = m.lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| PlomError::Degenerate("singular matrix in solve_lu".into()))?;
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Smallest eigenvalue of a symmetric matrix (for definiteness checks).
pub fn min_sym_eigenvalue(a: &ArrayView2<f64>) -> Result<f64> {
    let (vals, _) = sym_eig_desc(a)?;
    Ok(vals[vals.len() - 1])
}

/// Empirical mean over columns.
pub fn column_mean(a: &ArrayView2<f64>) -> Array1<f64> {
    let n = a.ncols() as f64;
    a.sum_axis(ndarray::Axis(1)) / n
}

/// Empirical covariance over columns with the 1/(n-1) convention.
pub fn column_covariance(a: &ArrayView2<f64>) -> Array2<f64> {
    let (d, n) = (a.nrows(), a.ncols());
    assert!(n >= 2, "covariance needs at least two samples");
    let mean = column_mean(a);
    let mut c = Array2::zeros((d, d));
    for col in a.columns() {
        let dev = &col.to_owned() - &mean;
        for i in 0..d {
            for j in 0..=i {
                c[[i, j]] += dev[i] * dev[j];
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in 0..=i {
            c[[i, j]] *= norm;
            c[[j, i]] = c[[i, j]];
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn eig_of_diagonal_is_sorted() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 3.0]];
        let (vals, vecs) = sym_eig_desc(&a.view()).unwrap();
        assert_abs_diff_eq!(vals[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[2], 1.0, epsilon = 1e-12);
        // eigenvector of the largest eigenvalue is e2, sign-fixed positive
        assert_abs_diff_eq!(vecs[[1, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eig_reconstructs_matrix() {
        let a = array![[2.0, 0.5, 0.1], [0.5, 1.0, -0.3], [0.1, -0.3, 0.7]];
        let (vals, vecs) = sym_eig_desc(&a.view()).unwrap();
        let lam = Array2::from_diag(&vals);
        let rec = vecs.dot(&lam).dot(&vecs.t());
        for (x, y) in a.iter().zip(rec.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn spd_solve_matches_direct() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let x = solve_spd(&a.view(), &b.view()).unwrap();
        let r0 = 4.0 * x[0] + 1.0 * x[1] - 1.0;
        let r1 = 1.0 * x[0] + 3.0 * x[1] - 2.0;
        assert!(r0.abs() < 1e-12 && r1.abs() < 1e-12);
    }

    #[test]
    fn covariance_of_whitened_pair() {
        let a = array![[1.0, -1.0], [1.0, -1.0]];
        let c = column_covariance(&a.view());
        assert_abs_diff_eq!(c[[0, 0]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[[0, 1]], 2.0, epsilon = 1e-14);
    }
}
