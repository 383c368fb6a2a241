//! Modified Gaussian kernel-density estimate of the whitened latent vector,
//! its log-density gradient, and closed-form mixture moments.
//!
//! The bandwidth pair `(s, ŝ)` is chosen so the smoothed law keeps the
//! empirical mean and identity covariance of the whitened samples. All
//! exponent sums are max-shifted per query; the shift cancels in ratios and
//! only guards against underflow of the raw exponentials.

use crate::{PlomError, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Silverman bandwidth and its moment-preserving modification.
pub fn bandwidths(n_d: usize, nu: usize) -> (f64, f64) {
    assert!(n_d >= 1 && nu >= 1);
    let s = (4.0 / (n_d as f64 * (2.0 + nu as f64))).powf(1.0 / (nu as f64 + 4.0));
    let s_hat = s * (s * s + (n_d as f64 - 1.0) / n_d as f64).powf(-0.5);
    (s, s_hat)
}

/// Gaussian mixture density model on the latent training cloud.
#[derive(Debug, Clone)]
pub struct KdeModel {
    /// Kernel centers `(ŝ/s) η_d^ℓ`, shape `ν x N_d`.
    centers: Array2<f64>,
    /// Raw latent samples, kept for the moment identities.
    eta_d: Array2<f64>,
    pub s: f64,
    pub s_hat: f64,
}

impl KdeModel {
    pub fn new(eta_d: &ArrayView2<f64>) -> Result<Self> {
        let (nu, n_d) = (eta_d.nrows(), eta_d.ncols());
        if nu == 0 || n_d == 0 {
            return Err(PlomError::Shape("empty latent sample matrix".into()));
        }
        if !eta_d.iter().all(|v| v.is_finite()) {
            return Err(PlomError::NonFinite { context: "KDE samples".into() });
        }
        let (s, s_hat) = bandwidths(n_d, nu);
        Ok(KdeModel {
            centers: eta_d.mapv(|v| v * s_hat / s),
            eta_d: eta_d.to_owned(),
            s,
            s_hat,
        })
    }

    pub fn nu(&self) -> usize {
        self.centers.nrows()
    }

    pub fn n_d(&self) -> usize {
        self.centers.ncols()
    }

    pub fn eta_d(&self) -> ArrayView2<'_, f64> {
        self.eta_d.view()
    }

    /// Shifted kernel exponents for one query: returns `(shift, e_l - shift)`
    /// with `e_l = -||center_l - eta||^2 / (2 ŝ^2)` and `shift = max_l e_l`.
    fn shifted_exponents(&self, eta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let inv = 1.0 / (2.0 * self.s_hat * self.s_hat);
        let mut e = Array1::zeros(self.n_d());
        for (l, c) in self.centers.columns().into_iter().enumerate() {
            let mut d2 = 0.0;
            for (a, b) in c.iter().zip(eta.iter()) {
                let d = a - b;
                d2 += d * d;
            }
            e[l] = -d2 * inv;
        }
        let shift = e.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        e.mapv_inplace(|v| v - shift);
        (shift, e)
    }

    /// The kernel sum `ζ(η) = (1/N_d) Σ_ℓ exp{-||(ŝ/s)η_d^ℓ - η||²/(2ŝ²)}`.
    ///
    /// Values in (0, 1]; underflow is clamped to the smallest positive
    /// normal so downstream logs stay finite.
    pub fn zeta(&self, eta: ArrayView1<f64>) -> f64 {
        let (shift, e) = self.shifted_exponents(eta);
        let z = shift.exp() * e.mapv(f64::exp).sum() / self.n_d() as f64;
        if z > 0.0 {
            z
        } else {
            f64::MIN_POSITIVE
        }
    }

    /// Gradient of ζ.
    pub fn grad_zeta(&self, eta: ArrayView1<f64>) -> Array1<f64> {
        let (shift, e) = self.shifted_exponents(eta);
        let mut g = Array1::zeros(self.nu());
        for (l, c) in self.centers.columns().into_iter().enumerate() {
            let w = e[l].exp();
            for (gi, (a, b)) in g.iter_mut().zip(c.iter().zip(eta.iter())) {
                *gi += (a - b) * w;
            }
        }
        g * (shift.exp() / (self.s_hat * self.s_hat * self.n_d() as f64))
    }

    /// Gradient of log ζ, with the shift cancelling exactly.
    pub fn grad_log_zeta(&self, eta: ArrayView1<f64>) -> Array1<f64> {
        let (_, e) = self.shifted_exponents(eta);
        let mut g = Array1::zeros(self.nu());
        let mut denom = 0.0;
        for (l, c) in self.centers.columns().into_iter().enumerate() {
            let w = e[l].exp();
            denom += w;
            for (gi, (a, b)) in g.iter_mut().zip(c.iter().zip(eta.iter())) {
                *gi += (a - b) * w;
            }
        }
        g / (self.s_hat * self.s_hat * denom)
    }

    /// Batched `grad_log_zeta` over query columns.
    ///
    /// Forms the full center-query distance matrix through one Gram product
    /// and shares the per-column max-shifted weights between numerator and
    /// denominator:
    /// `grad(u_c) = (C w_c - u_c Σw_c) / (ŝ² Σw_c)` with `C` the centers.
    pub fn grad_log_zeta_batch(&self, queries: &ArrayView2<f64>) -> Array2<f64> {
        let (nu, n_d, k) = (self.nu(), self.n_d(), queries.ncols());
        let inv = 1.0 / (2.0 * self.s_hat * self.s_hat);
        let center_norms: Vec<f64> = self
            .centers
            .columns()
            .into_iter()
            .map(|c| c.dot(&c))
            .collect();
        let query_norms: Vec<f64> = queries.columns().into_iter().map(|q| q.dot(&q)).collect();
        let gram = self.centers.t().dot(queries); // n_d x k

        // per-column max-shifted weights
        let mut weights = Array2::zeros((n_d, k));
        for c in 0..k {
            let mut emax = f64::NEG_INFINITY;
            for l in 0..n_d {
                let d2 = (center_norms[l] - 2.0 * gram[[l, c]] + query_norms[c]).max(0.0);
                let e = -d2 * inv;
                weights[[l, c]] = e;
                emax = emax.max(e);
            }
            for l in 0..n_d {
                weights[[l, c]] = (weights[[l, c]] - emax).exp();
            }
        }
        let sums = weights.sum_axis(Axis(0));
        let mut out = self.centers.dot(&weights); // nu x k
        for c in 0..k {
            let denom = self.s_hat * self.s_hat * sums[c];
            for r in 0..nu {
                out[[r, c]] = (out[[r, c]] - queries[[r, c]] * sums[c]) / denom;
            }
        }
        out
    }

    /// Potential φ(η) = -log ζ(η).
    pub fn potential(&self, eta: ArrayView1<f64>) -> f64 {
        let (shift, e) = self.shifted_exponents(eta);
        -(shift + (e.mapv(f64::exp).sum() / self.n_d() as f64).ln())
    }

    /// Closed-form mean of the smoothed law: `(ŝ/s) * empirical_mean(η_d)`.
    pub fn mixture_mean(&self) -> Array1<f64> {
        self.centers.mean_axis(Axis(1)).unwrap()
    }

    /// Closed-form covariance of the smoothed law:
    /// `ŝ² I + (ŝ/s)² ((N_d-1)/N_d) * empirical_cov(η_d)`.
    pub fn mixture_cov(&self) -> Array2<f64> {
        let nu = self.nu();
        let n_d = self.n_d() as f64;
        let mut cov = Array2::eye(nu) * (self.s_hat * self.s_hat);
        if self.n_d() >= 2 {
            let emp = crate::linalg::column_covariance(&self.eta_d.view());
            let f = (self.s_hat / self.s).powi(2) * (n_d - 1.0) / n_d;
            cov += &(emp * f);
        }
        cov
    }
}
