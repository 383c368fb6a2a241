//! Reduced-order Itô-SDE generator integrated by the Störmer-Verlet scheme.
//!
//! The chain evolves matrix iterates `[Z], [X]` of shape `ν x m` in the
//! diffusion-maps coordinates; the drift is evaluated in the full
//! `ν x N_d` space through `[Z][g]^T` and projected back with `[a]`.
//! After burn-in, one matrix realization is taken every `M0` steps and a
//! single column (a frozen uniform draw per realization) is emitted.

use crate::diffusion::DiffusionBasis;
use crate::kde::KdeModel;
use crate::reduction::{KlBasis, PcaBasis};
use crate::scm::Trajectory;
use crate::{PlomError, Result};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Integrator and emission parameters of the ISDE chain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IsdeParams {
    /// Dissipation parameter, advisory bound `f0 <= 4/ŝ_ν`.
    pub f0: f64,
    /// Step Δr; `None` resolves to `2π ŝ_ν / 20`.
    pub dr: Option<f64>,
    /// Burn-in steps before the first emission.
    pub l0: usize,
    /// Steps between consecutive emissions.
    pub m0: usize,
    /// Number of emitted realizations.
    pub n_mc: usize,
    pub seed_v0: u64,
    pub seed_wiener: u64,
    pub seed_j0: u64,
}

impl Default for IsdeParams {
    fn default() -> Self {
        IsdeParams {
            f0: 4.0,
            dr: None,
            l0: 100,
            m0: 20,
            n_mc: 1000,
            seed_v0: 101,
            seed_wiener: 202,
            seed_j0: 303,
        }
    }
}

impl IsdeParams {
    fn validate(&self) -> Result<()> {
        if !(self.f0 > 0.0) || self.l0 == 0 || self.m0 == 0 || self.n_mc == 0 {
            return Err(PlomError::Config(
                "ISDE parameters require f0 > 0 and positive l0, M0, n_MC".into(),
            ));
        }
        if let Some(dr) = self.dr {
            if !(dr > 0.0) {
                return Err(PlomError::Config("ISDE step dr must be positive".into()));
            }
        }
        Ok(())
    }

    /// Step actually used for a KDE bandwidth `s_hat`.
    pub fn resolve_dr(&self, s_hat: f64) -> f64 {
        self.dr
            .unwrap_or(2.0 * std::f64::consts::PI * s_hat / 20.0)
    }
}

/// Hashes identifying the frozen random streams of one run family.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StreamFingerprints {
    pub v0: String,
    pub wiener: String,
    pub j0: String,
}

/// Emitted latent realizations with full generation provenance.
#[derive(Debug, Clone)]
pub struct LearnedLatents {
    /// `ν x n_MC`.
    pub eta: Array2<f64>,
    /// Lagrange multiplier in effect (absent for the unconstrained run).
    pub lambda: Option<Array1<f64>>,
    pub params: IsdeParams,
    pub dr_used: f64,
    pub fingerprints: StreamFingerprints,
}

impl LearnedLatents {
    pub fn nu(&self) -> usize {
        self.eta.nrows()
    }

    pub fn n_mc(&self) -> usize {
        self.eta.ncols()
    }
}

fn hash_f64s(label: &str, values: impl Iterator<Item = f64>) -> String {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for v in values {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Standard-normal matrix drawn row-major from a dedicated stream.
fn normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            m[[i, j]] = StandardNormal.sample(rng);
        }
    }
    m
}

/// Wiener increments with per-entry variance Δr.
pub struct WienerStream {
    rng: ChaCha20Rng,
    sqrt_dr: f64,
    rows: usize,
    cols: usize,
}

impl WienerStream {
    pub fn new(seed: u64, dr: f64, rows: usize, cols: usize) -> Self {
        WienerStream {
            rng: ChaCha20Rng::seed_from_u64(seed),
            sqrt_dr: dr.sqrt(),
            rows,
            cols,
        }
    }

    pub fn next_increment(&mut self) -> Array2<f64> {
        normal_matrix(&mut self.rng, self.rows, self.cols) * self.sqrt_dr
    }
}

/// Integrate the ISDE with an arbitrary full-space drift.
///
/// `drift` maps the current `ν x N_d` state matrix `[Z][g]^T` to the drift
/// columns; the result is projected back through `[a]`. With `f0 = 0` the
/// noise term vanishes and the scheme reduces to plain leapfrog.
#[allow(clippy::too_many_arguments)]
pub fn verlet_chain<F>(
    drift: F,
    basis: &DiffusionBasis,
    z0: Array2<f64>,
    x0: Array2<f64>,
    f0: f64,
    dr: f64,
    l0: usize,
    m0: usize,
    n_mc: usize,
    wiener: &mut WienerStream,
    mut emit: impl FnMut(usize, &Array2<f64>),
) -> Result<()>
where
    F: Fn(&ArrayView2<f64>) -> Array2<f64>,
{
    let beta = f0 * dr / 4.0;
    let gain = 1.0 / (1.0 + beta);
    let noise_scale = f0.sqrt();
    // the identity basis needs no projection products
    let identity = basis.m() == basis.n_d() && basis.g == Array2::<f64>::eye(basis.n_d());
    let mut z = z0;
    let mut x = x0;
    let total = l0 + n_mc * m0;
    for step in 1..=total {
        let z_half = &z + &(&x * (dr / 2.0));
        let l_half = if identity {
            drift(&z_half.view())
        } else {
            drift(&z_half.dot(&basis.g.t()).view()).dot(&basis.a)
        };
        let dw = wiener.next_increment();
        let noise = if identity { dw } else { dw.dot(&basis.a) };
        x = (&x * (1.0 - beta) + &(l_half * dr) + noise_scale * noise) * gain;
        z = z_half + &x * (dr / 2.0);
        if step > l0 && (step - l0) % m0 == 0 {
            if !z.iter().all(|v| v.is_finite()) {
                return Err(PlomError::NonFinite {
                    context: format!("ISDE state at step {step}"),
                });
            }
            emit((step - l0) / m0, &z);
        }
    }
    Ok(())
}

/// Run the generator against a KDE target, optionally tilted by an extra
/// drift term (the constraint contribution `-<λ, ∂h^c/∂u>` per column).
pub fn stormer_verlet_run(
    kde: &KdeModel,
    basis: &DiffusionBasis,
    drift_extra: Option<&(dyn Fn(&ArrayView2<f64>) -> Array2<f64> + Sync)>,
    params: &IsdeParams,
    lambda: Option<Array1<f64>>,
) -> Result<LearnedLatents> {
    params.validate()?;
    let (nu, n_d) = (kde.nu(), kde.n_d());
    if basis.n_d() != n_d {
        return Err(PlomError::Shape(format!(
            "diffusion basis has N_d = {}, KDE has {}",
            basis.n_d(),
            n_d
        )));
    }
    let dr = params.resolve_dr(kde.s_hat);
    let advisory = 4.0 / kde.s_hat;
    if params.f0 > advisory {
        log::warn!("f0 = {} exceeds the advisory bound 4/s_hat = {advisory:.3}", params.f0);
    }

    // frozen streams; a constrained run reuses them at every Lagrange iteration
    let mut v0_rng = ChaCha20Rng::seed_from_u64(params.seed_v0);
    let v0 = normal_matrix(&mut v0_rng, nu, n_d);
    let mut j0_rng = ChaCha20Rng::seed_from_u64(params.seed_j0);
    let j0: Vec<usize> = (0..params.n_mc).map(|_| j0_rng.gen_range(0..n_d)).collect();
    let mut probe = WienerStream::new(params.seed_wiener, dr, nu, n_d);
    let first_block = probe.next_increment();
    let fingerprints = StreamFingerprints {
        v0: hash_f64s("v0", v0.iter().copied()),
        wiener: hash_f64s(
            &format!("wiener:{}:{}", params.seed_wiener, dr.to_bits()),
            first_block.iter().copied(),
        ),
        j0: hash_f64s("j0", j0.iter().map(|&v| v as f64)),
    };
    let mut wiener = WienerStream::new(params.seed_wiener, dr, nu, n_d);

    let drift = |u: &ArrayView2<f64>| -> Array2<f64> {
        let mut out = kde.grad_log_zeta_batch(u);
        if let Some(extra) = drift_extra {
            out += &extra(u);
        }
        out
    };

    let z0 = kde.eta_d().dot(&basis.a);
    let x0 = v0.dot(&basis.a);

    let mut eta = Array2::zeros((nu, params.n_mc));
    verlet_chain(
        drift,
        basis,
        z0,
        x0,
        params.f0,
        dr,
        params.l0,
        params.m0,
        params.n_mc,
        &mut wiener,
        |k, z| {
            // only column j0 of [Z][g]^T is emitted
            let col = z.dot(&basis.g.row(j0[k - 1]));
            eta.column_mut(k - 1).assign(&col);
        },
    )?;

    Ok(LearnedLatents {
        eta,
        lambda,
        params: params.clone(),
        dr_used: dr,
        fingerprints,
    })
}

/// Unconstrained generation: the λ = 0 member of the tilted family.
pub fn sample_unconstrained(
    kde: &KdeModel,
    basis: &DiffusionBasis,
    params: &IsdeParams,
) -> Result<LearnedLatents> {
    stormer_verlet_run(kde, basis, None, params, None)
}

/// Decode learned latents into (trajectory, control) realizations by the
/// affine composition of the PCA decode and the KL reconstruction.
pub fn decode_learned(
    latents: &LearnedLatents,
    pca: &PcaBasis,
    kl: &KlBasis,
) -> Result<Vec<(Trajectory, Array1<f64>)>> {
    let mut out = Vec::with_capacity(latents.n_mc());
    for l in 0..latents.n_mc() {
        let (q, w) = pca.decode_x(latents.eta.column(l))?;
        let traj = crate::reduction::kl_reconstruct(kl, q.view())?;
        out.push((traj, w));
    }
    Ok(out)
}
