//! Constraint machinery for the tilted generator: a kernel-regression
//! surrogate of the squared normalized residual (with conditioned
//! exponentials), closed-form moment constraints on the control parameter,
//! target assembly, and the Newton iterations on the Lagrange multipliers.

use crate::diffusion::DiffusionBasis;
use crate::kde::KdeModel;
use crate::linalg;
use crate::reduction::PcaBasis;
use crate::residual::ResidualReport;
use crate::sampler::{stormer_verlet_run, IsdeParams, LearnedLatents};
use crate::{PlomError, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

/// Exponent-shift mode of the surrogate kernels. All modes give identical
/// values in exact arithmetic; they differ only in floating-point range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShiftMode {
    None,
    /// Subtract the per-query mean exponent.
    Mean,
    /// Subtract the per-query smallest exponent (largest weight is 1).
    Max,
}

/// Kernel-regression surrogate of `η ↦ E{ρ² | H = η}` built on the
/// unconstrained learned set.
#[derive(Debug, Clone)]
pub struct RhoSurrogate {
    /// Scaled anchors `η̂_ar`, `ν x n_MC`.
    anchors: Array2<f64>,
    /// Squared normalized residuals `r^ℓ = (ρ^ℓ)²`.
    responses: Array1<f64>,
    /// Per-coordinate centering of the raw anchors.
    pub center: Array1<f64>,
    /// Per-coordinate scale of the raw anchors.
    pub scale: Array1<f64>,
    /// Silverman bandwidth of the joint (response, latent) estimate.
    pub s_sb: f64,
    /// Response standard deviation (metadata of the joint estimate).
    pub sigma_r: f64,
    pub shift: ShiftMode,
}

/// Build the residual surrogate from aligned latents and normalized residuals.
pub fn build_rho_surrogate(
    eta_ar: &ArrayView2<f64>,
    rho_ar: &[f64],
) -> Result<RhoSurrogate> {
    let (nu, n_mc) = (eta_ar.nrows(), eta_ar.ncols());
    if rho_ar.len() != n_mc {
        return Err(PlomError::Shape(format!(
            "{} residuals for {} latent columns",
            rho_ar.len(),
            n_mc
        )));
    }
    if n_mc < 10 {
        return Err(PlomError::Config("surrogate needs at least 10 realizations".into()));
    }
    if !eta_ar.iter().all(|v| v.is_finite()) || !rho_ar.iter().all(|v| v.is_finite()) {
        return Err(PlomError::NonFinite { context: "surrogate inputs".into() });
    }
    let center = linalg::column_mean(eta_ar);
    let mut scale = Array1::zeros(nu);
    for k in 0..nu {
        let mut acc = 0.0;
        for l in 0..n_mc {
            let d = eta_ar[[k, l]] - center[k];
            acc += d * d;
        }
        scale[k] = (acc / (n_mc as f64 - 1.0)).sqrt();
        if !(scale[k] > 0.0) {
            return Err(PlomError::Degenerate(format!(
                "latent coordinate {k} has zero variance; cannot scale anchors"
            )));
        }
    }
    let mut anchors = Array2::zeros((nu, n_mc));
    for l in 0..n_mc {
        for k in 0..nu {
            anchors[[k, l]] = (eta_ar[[k, l]] - center[k]) / scale[k];
        }
    }
    let responses = Array1::from_iter(rho_ar.iter().map(|&r| r * r));
    let mean_r = responses.sum() / n_mc as f64;
    let sigma_r = (responses.iter().map(|v| (v - mean_r) * (v - mean_r)).sum::<f64>()
        / (n_mc as f64 - 1.0))
        .sqrt();
    let d = nu as f64 + 1.0;
    let s_sb = (4.0 / (n_mc as f64 * (2.0 + d))).powf(1.0 / (4.0 + d));
    Ok(RhoSurrogate {
        anchors,
        responses,
        center,
        scale,
        s_sb,
        sigma_r,
        shift: ShiftMode::Mean,
    })
}

impl RhoSurrogate {
    pub fn nu(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn n_mc(&self) -> usize {
        self.anchors.ncols()
    }

    fn scale_query(&self, eta: ArrayView1<f64>) -> Array1<f64> {
        let mut q = Array1::zeros(self.nu());
        for k in 0..self.nu() {
            q[k] = (eta[k] - self.center[k]) / self.scale[k];
        }
        q
    }

    /// Kernel exponents `o_ℓ` for a scaled query.
    fn exponents(&self, q_hat: &Array1<f64>) -> Array1<f64> {
        let inv = 1.0 / (2.0 * self.s_sb * self.s_sb);
        let mut o = Array1::zeros(self.n_mc());
        for (l, a) in self.anchors.columns().into_iter().enumerate() {
            let mut d2 = 0.0;
            for (x, y) in a.iter().zip(q_hat.iter()) {
                let d = x - y;
                d2 += d * d;
            }
            o[l] = d2 * inv;
        }
        o
    }

    fn shift_of(&self, o: &Array1<f64>, mode: ShiftMode) -> f64 {
        match mode {
            ShiftMode::None => 0.0,
            ShiftMode::Mean => o.sum() / o.len() as f64,
            ShiftMode::Max => o.iter().fold(f64::INFINITY, |m, &v| m.min(v)),
        }
    }

    fn value_grad_with(&self, eta: ArrayView1<f64>, mode: ShiftMode) -> (f64, Array1<f64>) {
        let q_hat = self.scale_query(eta);
        let o = self.exponents(&q_hat);
        let shift = self.shift_of(&o, mode);
        let s2 = self.s_sb * self.s_sb;
        let mut a_sum = 0.0;
        let mut b_sum = 0.0;
        let mut grad_a = Array1::<f64>::zeros(self.nu());
        let mut grad_b = Array1::<f64>::zeros(self.nu());
        for (l, anchor) in self.anchors.columns().into_iter().enumerate() {
            let w = (-(o[l] - shift)).exp();
            a_sum += self.responses[l] * w;
            b_sum += w;
            for k in 0..self.nu() {
                let d = anchor[k] - q_hat[k];
                grad_a[k] += self.responses[l] * d * w;
                grad_b[k] += d * w;
            }
        }
        let value = a_sum / b_sum;
        let mut grad = Array1::zeros(self.nu());
        for k in 0..self.nu() {
            let gh = (grad_a[k] / s2 - value * grad_b[k] / s2) / b_sum;
            grad[k] = gh / self.scale[k];
        }
        (value, grad)
    }

    /// Surrogate value and gradient with respect to the raw latent η.
    ///
    /// Falls back to the max-shift (same value in exact arithmetic) if the
    /// configured shift leaves the sums outside floating-point range.
    pub fn value_grad(&self, eta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let (v, g) = self.value_grad_with(eta, self.shift);
        if v.is_finite() && g.iter().all(|x| x.is_finite()) {
            return (v, g);
        }
        self.value_grad_with(eta, ShiftMode::Max)
    }

    pub fn value(&self, eta: ArrayView1<f64>) -> f64 {
        self.value_grad(eta).0
    }

    /// Batched gradients for many queries (columns): distances through one
    /// Gram product, then per-column conditioned weights. Values equal the
    /// per-query path to rounding.
    pub fn grad_batch(&self, queries: &ArrayView2<f64>) -> Array2<f64> {
        let k_cols = queries.ncols();
        let nu = self.nu();
        let n_mc = self.n_mc();
        let s2 = self.s_sb * self.s_sb;

        // scaled queries
        let mut q_hat = Array2::zeros((nu, k_cols));
        for c in 0..k_cols {
            for k in 0..nu {
                q_hat[[k, c]] = (queries[[k, c]] - self.center[k]) / self.scale[k];
            }
        }
        let anchor_norms: Vec<f64> = self
            .anchors
            .columns()
            .into_iter()
            .map(|a| a.dot(&a))
            .collect();
        let query_norms: Vec<f64> = q_hat.columns().into_iter().map(|q| q.dot(&q)).collect();
        let gram = self.anchors.t().dot(&q_hat); // n_mc x K

        let mut out = Array2::zeros((nu, k_cols));
        let cols: Vec<Array1<f64>> = (0..k_cols)
            .into_par_iter()
            .map(|c| {
                let mut o = Array1::zeros(n_mc);
                for l in 0..n_mc {
                    let d2 = (anchor_norms[l] - 2.0 * gram[[l, c]] + query_norms[c]).max(0.0);
                    o[l] = d2 / (2.0 * s2);
                }
                let shift = self.shift_of(&o, self.shift);
                let mut a_sum = 0.0;
                let mut b_sum = 0.0;
                let mut grad_a = Array1::<f64>::zeros(nu);
                let mut grad_b = Array1::<f64>::zeros(nu);
                for l in 0..n_mc {
                    let w = (-(o[l] - shift)).exp();
                    a_sum += self.responses[l] * w;
                    b_sum += w;
                    for k in 0..nu {
                        let d = self.anchors[[k, l]] - q_hat[[k, c]];
                        grad_a[k] += self.responses[l] * d * w;
                        grad_b[k] += d * w;
                    }
                }
                if !(a_sum.is_finite() && b_sum.is_finite() && b_sum > 0.0) {
                    // conditioning rescue, value-identical in exact arithmetic
                    let (_, g) = self.value_grad_with(
                        queries.column(c),
                        ShiftMode::Max,
                    );
                    return g;
                }
                let value = a_sum / b_sum;
                let mut g = Array1::zeros(nu);
                for k in 0..nu {
                    let gh = (grad_a[k] / s2 - value * grad_b[k] / s2) / b_sum;
                    g[k] = gh / self.scale[k];
                }
                g
            })
            .collect();
        for (c, g) in cols.into_iter().enumerate() {
            out.column_mut(c).assign(&g);
        }
        out
    }
}

/// Targets `b^c = (b^c_ρ, b^c_w)` of the constrained learning.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConstraintTargets {
    pub b_rho: f64,
    /// First-moment block then second-moment block, length `2 n_w`.
    pub b_w: Vec<f64>,
}

/// Assemble targets from the raw training controls and the reference
/// residual report.
pub fn assemble_targets(
    ws_train: &ArrayView2<f64>,
    reference: &ResidualReport,
) -> Result<ConstraintTargets> {
    let b_rho = reference.b_c_rho.ok_or_else(|| {
        PlomError::Config("reference report carries no b^c_rho; compute it on the reference set".into())
    })?;
    let (n_w, n_d) = (ws_train.nrows(), ws_train.ncols());
    let mut b_w = vec![0.0; 2 * n_w];
    for j in 0..n_w {
        let row = ws_train.row(j);
        b_w[j] = row.sum() / n_d as f64;
        b_w[j + n_w] = row.iter().map(|v| v * v).sum::<f64>() / n_d as f64;
    }
    Ok(ConstraintTargets { b_rho, b_w })
}

/// A vector of expectation constraints `E{h(H)} = b` with its Jacobian,
/// split into a residual part (leading rows) and a moment part.
pub trait ConstraintSet: Sync {
    /// Total number of constraint rows.
    fn dim(&self) -> usize;

    /// Number of leading rows monitored as the residual error.
    fn split(&self) -> usize;

    fn targets(&self) -> Array1<f64>;

    /// Constraint values and Jacobian `(dim x ν)` at one latent point.
    fn eval(&self, eta: ArrayView1<f64>) -> (Array1<f64>, Array2<f64>);

    /// Constraint drift `-J(u_col)^T λ` for every column of `u`.
    fn drift_batch(&self, u: &ArrayView2<f64>, lambda: &ArrayView1<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((u.nrows(), u.ncols()));
        for (c, col) in u.columns().into_iter().enumerate() {
            let (_, jac) = self.eval(col);
            let drift = -jac.t().dot(&lambda.to_owned());
            out.column_mut(c).assign(&drift);
        }
        out
    }

    /// Constraint values at many points, `dim x K`.
    fn eval_values(&self, etas: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.dim(), etas.ncols()));
        let cols: Vec<Array1<f64>> = etas
            .columns()
            .into_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|c| self.eval(c).0)
            .collect();
        for (c, v) in cols.into_iter().enumerate() {
            out.column_mut(c).assign(&v);
        }
        out
    }
}

/// The production constraint: squared-residual surrogate plus first and
/// second moments of every control component.
pub struct RhoWConstraints {
    pub surrogate: RhoSurrogate,
    /// x̄_w block of the PCA mean.
    pub w_mean: Array1<f64>,
    /// `D = ψ_w ξ^{1/2}` (`n_w x ν`).
    pub w_matrix: Array2<f64>,
    pub targets: ConstraintTargets,
}

impl RhoWConstraints {
    pub fn new(surrogate: RhoSurrogate, pca: &PcaBasis, targets: ConstraintTargets) -> Result<Self> {
        if targets.b_w.len() != 2 * pca.n_w {
            return Err(PlomError::Shape("target vector does not match 2 n_w".into()));
        }
        if surrogate.nu() != pca.nu() {
            return Err(PlomError::Shape("surrogate and PCA latent dimensions differ".into()));
        }
        Ok(RhoWConstraints {
            surrogate,
            w_mean: pca.w_mean().to_owned(),
            w_matrix: pca.w_decode_matrix(),
            targets,
        })
    }

    fn n_w(&self) -> usize {
        self.w_mean.len()
    }
}

impl ConstraintSet for RhoWConstraints {
    fn dim(&self) -> usize {
        1 + 2 * self.n_w()
    }

    fn split(&self) -> usize {
        1
    }

    fn targets(&self) -> Array1<f64> {
        let mut b = Array1::zeros(self.dim());
        b[0] = self.targets.b_rho;
        for (j, &v) in self.targets.b_w.iter().enumerate() {
            b[1 + j] = v;
        }
        b
    }

    fn eval(&self, eta: ArrayView1<f64>) -> (Array1<f64>, Array2<f64>) {
        let n_w = self.n_w();
        let nu = self.surrogate.nu();
        let (rho_val, rho_grad) = self.surrogate.value_grad(eta);
        let w_vals = &self.w_mean + &self.w_matrix.dot(&eta.to_owned());
        let mut h = Array1::zeros(1 + 2 * n_w);
        let mut jac = Array2::zeros((1 + 2 * n_w, nu));
        h[0] = rho_val;
        jac.row_mut(0).assign(&rho_grad);
        for j in 0..n_w {
            h[1 + j] = w_vals[j];
            h[1 + n_w + j] = w_vals[j] * w_vals[j];
            let d_row = self.w_matrix.row(j);
            jac.row_mut(1 + j).assign(&d_row);
            let quad = d_row.mapv(|v| 2.0 * w_vals[j] * v);
            jac.row_mut(1 + n_w + j).assign(&quad);
        }
        (h, jac)
    }

    fn drift_batch(&self, u: &ArrayView2<f64>, lambda: &ArrayView1<f64>) -> Array2<f64> {
        let n_w = self.n_w();
        let k_cols = u.ncols();
        let mut out = self.surrogate.grad_batch(u) * (-lambda[0]);
        // moment rows: -D^T (λ_w1 + 2 λ_w2 ∘ w(u_c)) per column
        let w_vals = {
            let mut w = self.w_matrix.dot(u);
            for (j, mut row) in w.rows_mut().into_iter().enumerate() {
                row += self.w_mean[j];
            }
            w
        };
        let mut coef = Array2::zeros((n_w, k_cols));
        for j in 0..n_w {
            for c in 0..k_cols {
                coef[[j, c]] = lambda[1 + j] + 2.0 * lambda[1 + n_w + j] * w_vals[[j, c]];
            }
        }
        out -= &self.w_matrix.t().dot(&coef);
        out
    }
}

/// Mean-only constraint `E{H} = b`, the analytic exponential-tilt test case
/// and a useful diagnostic for moment matching.
pub struct MeanConstraint {
    pub b: Array1<f64>,
}

impl ConstraintSet for MeanConstraint {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn split(&self) -> usize {
        self.b.len()
    }

    fn targets(&self) -> Array1<f64> {
        self.b.clone()
    }

    fn eval(&self, eta: ArrayView1<f64>) -> (Array1<f64>, Array2<f64>) {
        (eta.to_owned(), Array2::eye(self.b.len()))
    }

    fn drift_batch(&self, u: &ArrayView2<f64>, lambda: &ArrayView1<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((u.nrows(), u.ncols()));
        for mut col in out.columns_mut() {
            col.assign(&lambda.mapv(|v| -v));
        }
        out
    }
}

/// Newton flavor on the Lagrange multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Algo {
    /// Residual constraint only.
    One,
    /// Coupled residual and moment constraints, full Hessian.
    Two,
    /// Residual and moment updates decoupled into diagonal blocks.
    Three,
}

impl Algo {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Algo::One),
            2 => Ok(Algo::Two),
            3 => Ok(Algo::Three),
            other => Err(PlomError::Config(format!("unknown algo id {other}"))),
        }
    }

    pub fn id(&self) -> u8 {
        match self {
            Algo::One => 1,
            Algo::Two => 2,
            Algo::Three => 3,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LagrangeRecord {
    pub iteration: usize,
    pub lambda: Vec<f64>,
    pub err_r: f64,
    pub err_w: f64,
    pub err_rw: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LagrangeTrace {
    pub algo: u8,
    pub records: Vec<LagrangeRecord>,
    pub i_opt: usize,
}

impl LagrangeTrace {
    pub fn record(&self, i: usize) -> &LagrangeRecord {
        &self.records[i - 1]
    }

    pub fn monitored(&self, rec: &LagrangeRecord) -> f64 {
        match self.algo {
            1 => rec.err_r,
            _ => rec.err_rw,
        }
    }
}

/// Options of the Lagrange iteration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LagrangeOptions {
    pub max_iter: usize,
    /// Consecutive non-improving iterations tolerated before stopping.
    pub patience: usize,
    /// Retrospective step halving when the monitored error more than doubles.
    pub damping: bool,
}

impl Default for LagrangeOptions {
    fn default() -> Self {
        LagrangeOptions {
            max_iter: 20,
            patience: 5,
            damping: false,
        }
    }
}

fn errors_of(
    targets: &Array1<f64>,
    estimate: &Array1<f64>,
    split: usize,
) -> (f64, f64, f64) {
    let p = targets.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dr: Vec<f64> = (0..split).map(|i| targets[i] - estimate[i]).collect();
    let br: Vec<f64> = (0..split).map(|i| targets[i]).collect();
    let err_r = norm(&dr) / norm(&br).max(f64::MIN_POSITIVE);
    let err_w = if split < p {
        let dw: Vec<f64> = (split..p).map(|i| targets[i] - estimate[i]).collect();
        let bw: Vec<f64> = (split..p).map(|i| targets[i]).collect();
        norm(&dw) / norm(&bw).max(f64::MIN_POSITIVE)
    } else {
        0.0
    };
    (err_r, err_w, (err_r * err_r + err_w * err_w).sqrt())
}

fn check_pd(block: &ArrayView2<f64>, iteration: usize) -> Result<()> {
    let min_eig = linalg::min_sym_eigenvalue(block)?;
    if min_eig <= 0.0 {
        return Err(PlomError::IndefiniteHessian { iteration, min_eig });
    }
    Ok(())
}

/// Newton iteration on the Lagrange multipliers of the tilted density.
///
/// Every iteration reruns the ISDE with the same frozen noise streams,
/// estimates `E{h^c}` and `cov{h^c}` from the emitted realizations, and
/// updates λ per the chosen algorithm. Returns the error trace and the
/// realizations of the best recorded iteration.
pub fn lagrange_iterate(
    algo: Algo,
    constraints: &dyn ConstraintSet,
    kde: &KdeModel,
    basis: &DiffusionBasis,
    params: &IsdeParams,
    options: &LagrangeOptions,
) -> Result<(LagrangeTrace, LearnedLatents)> {
    let p = constraints.dim();
    let split = constraints.split();
    let targets = constraints.targets();
    if algo != Algo::One && split >= p {
        return Err(PlomError::Config(
            "algos 2 and 3 need moment constraints besides the residual block".into(),
        ));
    }

    let mut lambda = Array1::<f64>::zeros(p);
    let mut records: Vec<LagrangeRecord> = Vec::new();
    let mut best: Option<(usize, f64, LearnedLatents)> = None;
    let mut prev_monitored: Option<f64> = None;
    let mut prev_step: Option<Array1<f64>> = None;

    for i in 1..=options.max_iter {
        let drift = |u: &ArrayView2<f64>| constraints.drift_batch(u, &lambda.view());
        let latents = stormer_verlet_run(kde, basis, Some(&drift), params, Some(lambda.clone()))
            .map_err(|e| PlomError::Stage {
                stage: format!("lagrange iteration {i}"),
                source: Box::new(e),
            })?;

        let h = constraints.eval_values(&latents.eta.view());
        let est = h.mean_axis(Axis(1)).unwrap();
        let cov = linalg::column_covariance(&h.view());
        let (err_r, err_w, err_rw) = errors_of(&targets, &est, split);
        let monitored = match algo {
            Algo::One => err_r,
            _ => err_rw,
        };
        records.push(LagrangeRecord {
            iteration: i,
            lambda: lambda.to_vec(),
            err_r,
            err_w,
            err_rw,
        });
        log::info!(
            "lagrange algo {} iter {i}: err_R={err_r:.4e} err_W={err_w:.4e} err_RW={err_rw:.4e}",
            algo.id()
        );

        let improved = best.as_ref().map_or(true, |(_, b, _)| monitored < *b);
        if improved {
            best = Some((i, monitored, latents));
        }
        let best_i = best.as_ref().unwrap().0;
        if i - best_i >= options.patience || i == options.max_iter {
            break;
        }

        // retrospective damping: when enabled and the last full step more
        // than doubled the monitored error, retreat half of it instead of
        // taking a fresh Newton step
        if options.damping {
            if let (Some(prev), Some(step)) = (prev_monitored, prev_step.as_ref()) {
                if monitored > 2.0 * prev {
                    let half = step.mapv(|v| v / 2.0);
                    lambda = &lambda + &half;
                    prev_step = Some(-half);
                    prev_monitored = Some(monitored);
                    continue;
                }
            }
        }

        // Newton update
        let grad = &targets - &est; // Γ'(λ)
        let mut step = Array1::zeros(p);
        match algo {
            Algo::One => {
                let block = cov.slice(ndarray::s![..split, ..split]).to_owned();
                check_pd(&block.view(), i)?;
                let gr = grad.slice(ndarray::s![..split]).to_owned();
                let delta = linalg::solve_spd(&block.view(), &gr.view())?;
                for k in 0..split {
                    step[k] = -delta[k];
                }
            }
            Algo::Two => {
                check_pd(&cov.view(), i)?;
                let delta = linalg::solve_spd(&cov.view(), &grad.view())?;
                step = -delta;
            }
            Algo::Three => {
                let block_r = cov.slice(ndarray::s![..split, ..split]).to_owned();
                check_pd(&block_r.view(), i)?;
                let gr = grad.slice(ndarray::s![..split]).to_owned();
                let dr = linalg::solve_spd(&block_r.view(), &gr.view())?;
                let block_w = cov.slice(ndarray::s![split.., split..]).to_owned();
                check_pd(&block_w.view(), i)?;
                let gw = grad.slice(ndarray::s![split..]).to_owned();
                let dw = linalg::solve_spd(&block_w.view(), &gw.view())?;
                for k in 0..split {
                    step[k] = -dr[k];
                }
                for k in split..p {
                    step[k] = -dw[k - split];
                }
            }
        }
        lambda = &lambda + &step;
        prev_step = Some(step);
        prev_monitored = Some(monitored);
    }

    let (i_opt, _, latents) = best.expect("at least one iteration ran");
    Ok((
        LagrangeTrace {
            algo: algo.id(),
            records,
            i_opt,
        },
        latents,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_surrogate(nu: usize, n_mc: usize, seed: u64) -> (RhoSurrogate, Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let eta = Array2::from_shape_fn((nu, n_mc), |_| StandardNormal.sample(&mut rng));
        let rho: Vec<f64> = (0..n_mc)
            .map(|l| {
                let col = eta.column(l);
                1.0 + 0.3 * col[0] + 0.1 * col.dot(&col) + 0.05 * rng.gen::<f64>()
            })
            .map(|v: f64| v.abs().sqrt())
            .collect();
        let s = build_rho_surrogate(&eta.view(), &rho).unwrap();
        (s, eta, rho)
    }

    #[test]
    fn constant_responses_give_constant_surrogate() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let eta = Array2::from_shape_fn((2, 20), |_| StandardNormal.sample(&mut rng));
        let rho = vec![1.3; 20];
        let s = build_rho_surrogate(&eta.view(), &rho).unwrap();
        for _ in 0..10 {
            let q = Array1::from_shape_fn(2, |_| StandardNormal.sample(&mut rng));
            let (v, g) = s.value_grad(q.view());
            assert_abs_diff_eq!(v, 1.3 * 1.3, epsilon = 1e-10);
            assert!(g.iter().all(|x| x.abs() < 1e-9));
        }
    }

    #[test]
    fn tight_bandwidth_interpolates_anchors() {
        let eta = array![[0.0, 4.0, -4.0], [0.0, 4.0, -4.0]];
        // pad to 10 anchors by spreading far apart
        let mut big = Array2::zeros((2, 10));
        for l in 0..10 {
            big[[0, l]] = (l as f64) * 6.0;
            big[[1, l]] = (l as f64) * -6.0;
        }
        let _ = eta;
        let rho: Vec<f64> = (0..10).map(|l| (1.0 + l as f64).sqrt()).collect();
        let mut s = build_rho_surrogate(&big.view(), &rho).unwrap();
        s.s_sb = 1e-3;
        for l in [0usize, 3, 9] {
            let v = s.value(big.column(l));
            assert_abs_diff_eq!(v, rho[l] * rho[l], epsilon = 1e-6);
        }
    }

    #[test]
    fn shift_modes_agree_where_representable() {
        let (mut s, eta, _) = toy_surrogate(3, 40, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..10 {
            let q = Array1::from_shape_fn(3, |_| StandardNormal.sample(&mut rng));
            s.shift = ShiftMode::Mean;
            let (v_mean, g_mean) = s.value_grad(q.view());
            s.shift = ShiftMode::None;
            let (v_none, g_none) = s.value_grad(q.view());
            s.shift = ShiftMode::Max;
            let (v_max, g_max) = s.value_grad(q.view());
            assert_abs_diff_eq!(v_mean, v_none, epsilon = 1e-10 * v_none.abs().max(1.0));
            assert_abs_diff_eq!(v_mean, v_max, epsilon = 1e-10 * v_max.abs().max(1.0));
            for k in 0..3 {
                let sc = g_none[k].abs().max(1.0);
                assert!((g_mean[k] - g_none[k]).abs() < 1e-10 * sc);
                assert!((g_mean[k] - g_max[k]).abs() < 1e-10 * sc);
            }
        }
        let _ = eta;
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (s, _, _) = toy_surrogate(3, 60, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let h = 1e-5;
        for _ in 0..20 {
            let q = Array1::from_shape_fn(3, |_| StandardNormal.sample(&mut rng));
            let (_, g) = s.value_grad(q.view());
            for k in 0..3 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let fd = (s.value(qp.view()) - s.value(qm.view())) / (2.0 * h);
                let scale = g[k].abs().max(1e-8);
                assert!(
                    ((g[k] - fd) / scale).abs() < 1e-6,
                    "grad[{k}] = {} vs fd {}",
                    g[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn batch_gradients_match_scalar_path() {
        let (s, _, _) = toy_surrogate(4, 50, 17);
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let queries = Array2::from_shape_fn((4, 7), |_| StandardNormal.sample(&mut rng));
        let batch = s.grad_batch(&queries.view());
        for c in 0..7 {
            let (_, g) = s.value_grad(queries.column(c));
            for k in 0..4 {
                assert_abs_diff_eq!(batch[[k, c]], g[k], epsilon = 1e-9 * g[k].abs().max(1.0));
            }
        }
    }

    fn toy_pca(nu: usize, n_w: usize, seed: u64) -> PcaBasis {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n_x = nu + n_w;
        let x = Array2::from_shape_fn((n_x, 3 * n_x), |_| StandardNormal.sample(&mut rng));
        let (pca, _) = crate::reduction::pca_reduce(&x.view(), nu, 1e-9).unwrap();
        pca
    }

    #[test]
    fn full_jacobian_matches_finite_differences() {
        let pca = toy_pca(3, 2, 23);
        let nu = pca.nu();
        let (s, _, _) = toy_surrogate(nu, 60, 29);
        let targets = ConstraintTargets { b_rho: 1.0, b_w: vec![0.0, 0.0, 1.0, 1.0] };
        let cons = RhoWConstraints::new(s, &pca, targets).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let h = 1e-6;
        for _ in 0..20 {
            let q = Array1::from_shape_fn(nu, |_| StandardNormal.sample(&mut rng));
            let (_, jac) = cons.eval(q.view());
            for k in 0..nu {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let (hp, _) = cons.eval(qp.view());
                let (hm, _) = cons.eval(qm.view());
                for r in 0..cons.dim() {
                    let fd = (hp[r] - hm[r]) / (2.0 * h);
                    let tol = if r == 0 {
                        1e-5 * jac[[r, k]].abs().max(1e-6)
                    } else {
                        // closed-form rows: fd error only
                        1e-7 * jac[[r, k]].abs().max(1.0)
                    };
                    assert!(
                        (jac[[r, k]] - fd).abs() < tol,
                        "row {r} col {k}: {} vs {}",
                        jac[[r, k]],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn quadratic_row_gradient_vanishes_where_w_is_zero() {
        let pca = toy_pca(2, 1, 37);
        let nu = pca.nu();
        let (s, _, _) = toy_surrogate(nu, 40, 41);
        let targets = ConstraintTargets { b_rho: 1.0, b_w: vec![0.0, 1.0] };
        let cons = RhoWConstraints::new(s, &pca, targets).unwrap();
        // solve for eta with w_1(eta) = 0 along the first D direction
        let d = cons.w_matrix.row(0).to_owned();
        let alpha = -cons.w_mean[0] / d.dot(&d);
        let eta = d.mapv(|v| v * alpha);
        let (h, jac) = cons.eval(eta.view());
        assert_abs_diff_eq!(h[1], 0.0, epsilon = 1e-12);
        for k in 0..nu {
            assert_abs_diff_eq!(jac[[2, k]], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn drift_batch_matches_per_column_default() {
        let pca = toy_pca(3, 2, 43);
        let nu = pca.nu();
        let (s, _, _) = toy_surrogate(nu, 50, 47);
        let targets = ConstraintTargets { b_rho: 1.0, b_w: vec![0.1, -0.2, 1.0, 0.9] };
        let cons = RhoWConstraints::new(s, &pca, targets).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let u = Array2::from_shape_fn((nu, 6), |_| StandardNormal.sample(&mut rng));
        let lambda = Array1::from_shape_fn(cons.dim(), |_| StandardNormal.sample(&mut rng));
        let fast = cons.drift_batch(&u.view(), &lambda.view());
        // default implementation through eval()
        let mut slow = Array2::zeros((nu, 6));
        for (c, col) in u.columns().into_iter().enumerate() {
            let (_, jac) = cons.eval(col);
            slow.column_mut(c).assign(&(-jac.t().dot(&lambda)));
        }
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn targets_from_standard_normal_prior() {
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        let n = 200_000;
        let ws = Array2::from_shape_fn((2, n), |_| StandardNormal.sample(&mut rng));
        let report = ResidualReport {
            rho_hat: vec![1.0, 1.2, 0.8],
            rho: vec![1.0, 1.2, 0.8],
            rho_ref_mean: 1.0,
            b_c_rho: Some(1.04),
            subsample: crate::grid::Subsample::full(3),
            n_d_ref: 3,
            kl_representation: true,
        };
        let t = assemble_targets(&ws.view(), &report).unwrap();
        assert_abs_diff_eq!(t.b_rho, 1.04, epsilon = 1e-15);
        for j in 0..2 {
            assert!(t.b_w[j].abs() < 0.01, "first moment {}", t.b_w[j]);
            assert!((t.b_w[2 + j] - 1.0).abs() < 0.02, "second moment {}", t.b_w[2 + j]);
        }
    }

    #[test]
    fn self_consistent_targets_stop_at_first_iteration() {
        // targets set exactly to the λ=0 sample moments
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let eta_d = Array2::from_shape_fn((1, 6), |_| StandardNormal.sample(&mut rng));
        let kde = KdeModel::new(&eta_d.view()).unwrap();
        let basis = crate::diffusion::build_diffusion_basis(&eta_d.view(), 1.0, 4).unwrap();
        let params = IsdeParams { n_mc: 300, l0: 30, m0: 3, ..Default::default() };
        let free = crate::sampler::sample_unconstrained(&kde, &basis, &params).unwrap();
        let mean = free.eta.mean_axis(Axis(1)).unwrap();
        let cons = MeanConstraint { b: mean };
        let (trace, best) = lagrange_iterate(
            Algo::One,
            &cons,
            &kde,
            &basis,
            &params,
            &LagrangeOptions { max_iter: 6, patience: 2, damping: false },
        )
        .unwrap();
        assert_eq!(trace.i_opt, 1);
        assert!(trace.records[0].err_r < 1e-12);
        assert_eq!(best.eta, free.eta);
    }

    #[test]
    fn gaussian_tilt_recovers_lambda() {
        // p_H ~ KDE of whitened standard-normal draws (mixture mean 0,
        // variance 1 exactly), constraint E{H} = b, analytic multiplier
        // λ = -b. A dense 1-D cloud has overlapping kernels, so the chain
        // runs unprojected (m = N_d) here.
        let mut rng = ChaCha20Rng::seed_from_u64(67);
        let n_d = 120;
        let mut eta_d = Array2::from_shape_fn((1, n_d), |_| StandardNormal.sample(&mut rng));
        let mean = eta_d.sum() / n_d as f64;
        eta_d.mapv_inplace(|v| v - mean);
        let var = eta_d.iter().map(|v| v * v).sum::<f64>() / (n_d as f64 - 1.0);
        eta_d.mapv_inplace(|v| v / var.sqrt());
        let kde = KdeModel::new(&eta_d.view()).unwrap();
        let basis = crate::diffusion::DiffusionBasis::without_projection(n_d);
        let params = IsdeParams { n_mc: 2500, l0: 150, m0: 3, ..Default::default() };
        let b = 0.4;
        let cons = MeanConstraint { b: array![b] };
        let (trace, best) = lagrange_iterate(
            Algo::One,
            &cons,
            &kde,
            &basis,
            &params,
            &LagrangeOptions { max_iter: 8, patience: 3, damping: false },
        )
        .unwrap();
        let lam = best.lambda.as_ref().unwrap()[0];
        // the tight 5% bound at n_MC = 1e4 lives in the acceptance suite
        assert!(
            (lam - (-b)).abs() < 0.06,
            "lambda {lam} vs analytic {} (trace: {:?})",
            -b,
            trace
                .records
                .iter()
                .map(|r| (r.iteration, r.lambda[0], r.err_r))
                .collect::<Vec<_>>()
        );
        // the constrained mean actually moved to b
        let final_err = trace.record(trace.i_opt).err_r;
        assert!(final_err < 0.1, "final err_R {final_err}");
    }
}
