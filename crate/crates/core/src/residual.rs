//! Time-subsampled random residual of the SCM on arbitrary (state, control)
//! realizations, and its normalization against a reference set.

use crate::grid::{Subsample, TimeGrid};
use crate::reduction::{KlBasis, QSamples};
use crate::sampler::LearnedLatents;
use crate::scm::{ResidualNorm, ScmModel, StatePoint, Trajectory};
use crate::{PlomError, Result};
use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;

/// A source of states at sampling times: either a stored trajectory or a
/// lazily decoded reduced representation.
#[derive(Clone, Copy)]
pub enum StateRef<'a> {
    Traj(&'a Trajectory),
    Decoded {
        basis: &'a KlBasis,
        q: ArrayView1<'a, f64>,
    },
}

impl StateRef<'_> {
    pub fn point(&self, n: usize, grid: &TimeGrid) -> Result<StatePoint> {
        match self {
            StateRef::Traj(t) => t.point(n, grid),
            StateRef::Decoded { basis, q } => basis.decode_point(*q, n),
        }
    }
}

/// Scalar residual norm at one time per the model's norm spec.
pub fn residual_norm_at(r: &ArrayView1<f64>, norm: &ResidualNorm) -> Result<f64> {
    match norm {
        ResidualNorm::Plain => {
            let n = r.len() as f64;
            Ok((r.dot(r) / n).sqrt())
        }
        ResidualNorm::Blocks(sizes) => {
            let total: usize = sizes.iter().sum();
            if total != r.len() {
                return Err(PlomError::Shape(format!(
                    "block sizes sum to {total}, residual has length {}",
                    r.len()
                )));
            }
            let mut acc = 0.0;
            let mut offset = 0;
            for &nb in sizes {
                let block = r.slice(ndarray::s![offset..offset + nb]);
                acc += block.dot(&block) / (nb as f64 * nb as f64);
                offset += nb;
            }
            Ok(acc.sqrt())
        }
    }
}

/// Per-subsample-time residual vectors of one realization.
pub fn residual_realization(
    model: &dyn ScmModel,
    state: StateRef<'_>,
    w: ArrayView1<f64>,
    subsample: &Subsample,
    grid: &TimeGrid,
) -> Result<Vec<Array1<f64>>> {
    if !model.in_support(w) {
        log::warn!("evaluating residual at a control outside the prior support");
    }
    subsample
        .indices
        .iter()
        .map(|&n| {
            let p = state.point(n, grid)?;
            model.residual_point(&p, w, grid)
        })
        .collect()
}

/// `ρ̂` from per-time residual vectors: `ρ̂² = (1/n_sp) Σ R_norm(τ)²`.
pub fn rho_hat(per_tau: &[Array1<f64>], norm: &ResidualNorm) -> Result<f64> {
    if per_tau.is_empty() {
        return Err(PlomError::Config("rho_hat needs a nonempty subsample".into()));
    }
    let mut acc = 0.0;
    for r in per_tau {
        let rn = residual_norm_at(&r.view(), norm)?;
        acc += rn * rn;
    }
    Ok((acc / per_tau.len() as f64).sqrt())
}

/// Fused evaluation of `ρ̂` for one realization.
pub fn rho_hat_of(
    model: &dyn ScmModel,
    state: StateRef<'_>,
    w: ArrayView1<f64>,
    subsample: &Subsample,
    grid: &TimeGrid,
) -> Result<f64> {
    let norm = model.residual_norm();
    let mut acc = 0.0;
    for &n in &subsample.indices {
        let p = state.point(n, grid)?;
        let r = model.residual_point(&p, w, grid)?;
        let rn = residual_norm_at(&r.view(), &norm)?;
        acc += rn * rn;
    }
    Ok((acc / subsample.len() as f64).sqrt())
}

/// Residual statistics of one realization set.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Raw per-realization residuals `ρ̂^ℓ`.
    pub rho_hat: Vec<f64>,
    /// Normalized residuals `ρ^ℓ = ρ̂^ℓ / ρ̄_ref`.
    pub rho: Vec<f64>,
    /// The normalization constant used.
    pub rho_ref_mean: f64,
    /// Second moment of the normalized reference residual (the constraint
    /// target `b^c_ρ`), present on reference reports only.
    pub b_c_rho: Option<f64>,
    pub subsample: Subsample,
    /// Number of realizations the normalization was computed from.
    pub n_d_ref: usize,
    /// Whether states were decoded through the KL representation.
    pub kl_representation: bool,
}

impl ResidualReport {
    pub fn mean_rho_hat(&self) -> f64 {
        self.rho_hat.iter().sum::<f64>() / self.rho_hat.len() as f64
    }

    pub fn std_rho_hat(&self) -> f64 {
        let m = self.mean_rho_hat();
        let n = self.rho_hat.len() as f64;
        (self.rho_hat.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    }

    /// Empirical L2 norm estimate `sqrt(mean of ρ̂²)`.
    pub fn l2_rho_hat(&self) -> f64 {
        (self.rho_hat.iter().map(|v| v * v).sum::<f64>() / self.rho_hat.len() as f64).sqrt()
    }

    pub fn mean_rho(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len() as f64
    }
}

/// Reference residual of the training set evaluated through its KL
/// representation; fixes the normalization so the reference `ρ` has unit
/// mean, and produces the constraint target `b^c_ρ = mean(ρ_ref²)`.
pub fn reference_report(
    model: &dyn ScmModel,
    kl: &KlBasis,
    q_samples: &QSamples,
    ws: &ArrayView2<f64>,
    subsample: &Subsample,
) -> Result<ResidualReport> {
    let n_ref = q_samples.n_d();
    if ws.ncols() != n_ref {
        return Err(PlomError::Shape("W sample count differs from Q".into()));
    }
    let rho_hat: Vec<f64> = (0..n_ref)
        .into_par_iter()
        .map(|l| {
            rho_hat_of(
                model,
                StateRef::Decoded { basis: kl, q: q_samples.q.column(l) },
                ws.column(l),
                subsample,
                &kl.grid,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let rho_ref_mean = rho_hat.iter().sum::<f64>() / n_ref as f64;
    if !(rho_ref_mean > 0.0) {
        return Err(PlomError::Degenerate(
            "reference residual mean is zero; nothing to normalize against".into(),
        ));
    }
    let rho: Vec<f64> = rho_hat.iter().map(|v| v / rho_ref_mean).collect();
    let b_c_rho = rho.iter().map(|v| v * v).sum::<f64>() / n_ref as f64;
    Ok(ResidualReport {
        rho_hat,
        rho,
        rho_ref_mean,
        b_c_rho: Some(b_c_rho),
        subsample: subsample.clone(),
        n_d_ref: n_ref,
        kl_representation: true,
    })
}

/// Residual report of learned latent realizations decoded through
/// (PCA, KL), normalized by a previously computed reference mean.
pub fn learned_report(
    model: &dyn ScmModel,
    kl: &KlBasis,
    pca: &crate::reduction::PcaBasis,
    latents: &LearnedLatents,
    subsample: &Subsample,
    rho_ref_mean: f64,
) -> Result<ResidualReport> {
    let n = latents.n_mc();
    let rho_hat: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|l| {
            let (q, w) = pca.decode_x(latents.eta.column(l))?;
            rho_hat_of(
                model,
                StateRef::Decoded { basis: kl, q: q.view() },
                w.view(),
                subsample,
                &kl.grid,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let rho = rho_hat.iter().map(|v| v / rho_ref_mean).collect();
    Ok(ResidualReport {
        rho_hat,
        rho,
        rho_ref_mean,
        b_c_rho: None,
        subsample: subsample.clone(),
        n_d_ref: latents.n_mc(),
        kl_representation: true,
    })
}

/// Residual report of raw trajectories (training pairs as solved).
pub fn trajectory_report(
    model: &dyn ScmModel,
    pairs: &[(Trajectory, Array1<f64>)],
    grid: &TimeGrid,
    subsample: &Subsample,
    rho_ref_mean: f64,
) -> Result<ResidualReport> {
    let rho_hat: Vec<f64> = pairs
        .par_iter()
        .map(|(traj, w)| rho_hat_of(model, StateRef::Traj(traj), w.view(), subsample, grid))
        .collect::<Result<Vec<_>>>()?;
    let rho = rho_hat.iter().map(|v| v / rho_ref_mean).collect();
    Ok(ResidualReport {
        rho_hat,
        rho,
        rho_ref_mean,
        b_c_rho: None,
        subsample: subsample.clone(),
        n_d_ref: pairs.len(),
        kl_representation: false,
    })
}
