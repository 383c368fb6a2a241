//! 2D incompressible lid-driven cavity on a staggered grid.
//!
//! Time stepping splits each step into explicit convection, implicit
//! viscosity, and a pressure projection enforcing the discrete
//! incompressibility constraint. The residual operator re-evaluates the
//! recombined scheme equations at a sampling time from `(U, U̇, P)` alone,
//! so solver output has residuals at the level of the inner linear-solver
//! tolerance.
//!
//! Field layout: `u1` lives on vertical cell interfaces, `u2` on horizontal
//! interfaces, `p` at cell centers; ghost layers implement the no-slip and
//! moving-lid boundary conditions.

use crate::grid::TimeGrid;
use crate::scm::{DerivativeOrder, InitialState, ResidualNorm, ScmModel, StatePoint, Trajectory};
use crate::{PlomError, Result};
use ndarray::{array, Array1, Array2, ArrayView1};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erf;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavityConfig {
    pub lx1: f64,
    pub lx2: f64,
    pub nx1: usize,
    pub nx2: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    /// Donor-cell upwind blend of the convection stencil.
    pub blend: f64,
    /// Linear-solver tolerance (max-norm of the residual, relative to the
    /// max-norm of the right-hand side).
    pub lin_tol: f64,
    /// Iteration cap factor: cap = factor * N_p.
    pub lin_iter_factor: usize,
}

impl Default for CavityConfig {
    fn default() -> Self {
        CavityConfig {
            lx1: 0.9,
            lx2: 1.0,
            nx1: 32,
            nx2: 36,
            v_min: 0.1,
            v_max: 0.3,
            nu_min: 1e-5,
            nu_max: 3e-5,
            blend: 0.9,
            lin_tol: 1e-10,
            lin_iter_factor: 10,
        }
    }
}

impl CavityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx1 < 4 || self.nx2 < 4 {
            return Err(PlomError::Config("cavity grid must be at least 4x4".into()));
        }
        if !(self.lx1 > 0.0 && self.lx2 > 0.0 && self.v_min > 0.0 && self.nu_min > 0.0) {
            return Err(PlomError::Config("cavity lengths and bounds must be positive".into()));
        }
        if self.v_max <= self.v_min || self.nu_max <= self.nu_min {
            return Err(PlomError::Config("cavity parameter bounds must be ordered".into()));
        }
        Ok(())
    }

    pub fn n_u1(&self) -> usize {
        (self.nx1 - 1) * self.nx2
    }

    pub fn n_u2(&self) -> usize {
        self.nx1 * (self.nx2 - 1)
    }

    pub fn n_p(&self) -> usize {
        self.nx1 * self.nx2
    }

    pub fn state_dim(&self) -> usize {
        self.n_u1() + self.n_u2() + self.n_p()
    }

    pub fn hx(&self) -> f64 {
        self.lx1 / self.nx1 as f64
    }

    pub fn hy(&self) -> f64 {
        self.lx2 / self.nx2 as f64
    }
}

/// Prior map from standard-normal controls to the physical parameters:
/// `(V_CFD, ν_CFD, Re)` with `Re = lx1 * V_CFD / ν_CFD`.
pub fn prior_map(cfg: &CavityConfig, w: ArrayView1<f64>) -> (f64, f64, f64) {
    let u1 = (1.0 + erf(w[0] / std::f64::consts::SQRT_2)) / 2.0;
    let u2 = (1.0 + erf(w[1] / std::f64::consts::SQRT_2)) / 2.0;
    let eps_v = cfg.v_max / cfg.v_min - 1.0;
    let eps_nu = cfg.nu_max / cfg.nu_min - 1.0;
    let v = cfg.v_min * (1.0 + eps_v * u1);
    let nu = cfg.nu_min * (1.0 + eps_nu * u2);
    (v, nu, cfg.lx1 * v / nu)
}

/// Full staggered fields with ghost layers.
#[derive(Debug, Clone)]
struct Fields {
    /// `(nx1+1) x (nx2+2)`: u1 on vertical interfaces plus ghost rows.
    u: Array2<f64>,
    /// `(nx1+2) x (nx2+1)`: u2 on horizontal interfaces plus ghost columns.
    v: Array2<f64>,
    /// `(nx1+2) x (nx2+2)`: p at cell centers plus ghost edges.
    p: Array2<f64>,
}

impl Fields {
    fn zeros(cfg: &CavityConfig) -> Self {
        Fields {
            u: Array2::zeros((cfg.nx1 + 1, cfg.nx2 + 2)),
            v: Array2::zeros((cfg.nx1 + 2, cfg.nx2 + 1)),
            p: Array2::zeros((cfg.nx1 + 2, cfg.nx2 + 2)),
        }
    }
}

/// No-slip walls, moving lid on the top boundary.
fn set_velocity_bc(cfg: &CavityConfig, u: &mut Array2<f64>, v: &mut Array2<f64>, lid: f64) {
    let (nx, ny) = (cfg.nx1, cfg.nx2);
    for j in 0..=ny + 1 {
        u[[0, j]] = 0.0;
        u[[nx, j]] = 0.0;
    }
    for i in 0..=nx {
        u[[i, 0]] = -u[[i, 1]];
        u[[i, ny + 1]] = 2.0 * lid - u[[i, ny]];
    }
    for i in 0..=nx + 1 {
        v[[i, 0]] = 0.0;
        v[[i, ny]] = 0.0;
    }
    for j in 0..=ny {
        v[[0, j]] = -v[[1, j]];
        v[[nx + 1, j]] = -v[[nx, j]];
    }
}

fn set_pressure_bc(cfg: &CavityConfig, p: &mut Array2<f64>) {
    let (nx, ny) = (cfg.nx1, cfg.nx2);
    for j in 1..=ny {
        p[[0, j]] = p[[1, j]];
        p[[nx + 1, j]] = p[[nx, j]];
    }
    for i in 0..=nx + 1 {
        p[[i, 0]] = p[[i, 1]];
        p[[i, ny + 1]] = p[[i, ny]];
    }
}

/// Donor-cell blended convection term at interior u points, `(nx1-1) x nx2`.
fn convection_u(cfg: &CavityConfig, u: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (nx, ny) = (cfg.nx1, cfg.nx2);
    let (hx, hy, g) = (cfg.hx(), cfg.hy(), cfg.blend);
    let mut out = Array2::zeros((nx - 1, ny));
    for iu in 0..nx - 1 {
        let i = iu + 1;
        for j0 in 0..ny {
            let j = j0 + 1;
            let du2dx = ((u[[i, j]] + u[[i + 1, j]]).powi(2) - (u[[i - 1, j]] + u[[i, j]]).powi(2))
                / (4.0 * hx)
                + g * ((u[[i, j]] + u[[i + 1, j]]).abs() * (u[[i, j]] - u[[i + 1, j]])
                    - (u[[i - 1, j]] + u[[i, j]]).abs() * (u[[i - 1, j]] - u[[i, j]]))
                    / (4.0 * hx);
            let vn = v[[i, j]] + v[[i + 1, j]];
            let vs = v[[i, j - 1]] + v[[i + 1, j - 1]];
            let duvdy = (vn * (u[[i, j]] + u[[i, j + 1]]) - vs * (u[[i, j - 1]] + u[[i, j]]))
                / (4.0 * hy)
                + g * (vn.abs() * (u[[i, j]] - u[[i, j + 1]])
                    - vs.abs() * (u[[i, j - 1]] - u[[i, j]]))
                    / (4.0 * hy);
            out[[iu, j0]] = du2dx + duvdy;
        }
    }
    out
}

/// Donor-cell blended convection term at interior v points, `nx1 x (nx2-1)`.
fn convection_v(cfg: &CavityConfig, u: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (nx, ny) = (cfg.nx1, cfg.nx2);
    let (hx, hy, g) = (cfg.hx(), cfg.hy(), cfg.blend);
    let mut out = Array2::zeros((nx, ny - 1));
    for iv in 0..nx {
        let i = iv + 1;
        for jv in 0..ny - 1 {
            let j = jv + 1;
            let ue = u[[i, j]] + u[[i, j + 1]];
            let uw = u[[i - 1, j]] + u[[i - 1, j + 1]];
            let duvdx = (ue * (v[[i, j]] + v[[i + 1, j]]) - uw * (v[[i - 1, j]] + v[[i, j]]))
                / (4.0 * hx)
                + g * (ue.abs() * (v[[i, j]] - v[[i + 1, j]])
                    - uw.abs() * (v[[i - 1, j]] - v[[i, j]]))
                    / (4.0 * hx);
            let dv2dy = ((v[[i, j]] + v[[i, j + 1]]).powi(2) - (v[[i, j - 1]] + v[[i, j]]).powi(2))
                / (4.0 * hy)
                + g * ((v[[i, j]] + v[[i, j + 1]]).abs() * (v[[i, j]] - v[[i, j + 1]])
                    - (v[[i, j - 1]] + v[[i, j]]).abs() * (v[[i, j - 1]] - v[[i, j]]))
                    / (4.0 * hy);
            out[[iv, jv]] = duvdx + dv2dy;
        }
    }
    out
}

/// 5-point Laplacian of the u field at interior u points (ghosts included).
fn laplacian_u(cfg: &CavityConfig, u: &Array2<f64>) -> Array2<f64> {
    let (nx, ny) = (cfg.nx1, cfg.nx2);
    let (hx2, hy2) = (cfg.hx() * cfg.hx(), cfg.hy() * cfg.hy());
    let mut out = Array2::zeros((nx - 1, ny));
    for iu in 0..nx - 1 {
        let i = iu + 1;
        for j0 in 0..ny {
            let j = j0 + 1;
            out[[iu, j0]] = (u[[i + 1, j]] - 2.0 * u[[i, j]] + u[[i - 1, j]]) / hx2
                + (u[[i, j + 1]] - 2.0 * u[[i, j]] + u[[i, j - 1]]) / hy2;
        }
    }
    out
}

fn laplacian_v(cfg: &CavityConfig, v: &Array2<f64>) -> Array2<f64> {
    let (nx, ny) = (cfg.nx1, cfg.nx2);
    let (hx2, hy2) = (cfg.hx() * cfg.hx(), cfg.hy() * cfg.hy());
    let mut out = Array2::zeros((nx, ny - 1));
    for iv in 0..nx {
        let i = iv + 1;
        for jv in 0..ny - 1 {
            let j = jv + 1;
            out[[iv, jv]] = (v[[i + 1, j]] - 2.0 * v[[i, j]] + v[[i - 1, j]]) / hx2
                + (v[[i, j + 1]] - 2.0 * v[[i, j]] + v[[i, j - 1]]) / hy2;
        }
    }
    out
}

/// Conjugate gradients on an SPD operator over interior-shaped arrays.
///
/// Stops when the residual max-norm falls below `tol * max(1, ||b||_inf)`.
fn conjugate_gradient(
    apply: impl Fn(&Array2<f64>) -> Array2<f64>,
    b: &Array2<f64>,
    tol: f64,
    max_iter: usize,
    project_mean: bool,
) -> Result<Array2<f64>> {
    let mut b = b.clone();
    if project_mean {
        let m = b.mean().unwrap();
        b -= m;
    }
    let b_inf = b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let target = tol * b_inf.max(1.0);
    let mut x = Array2::zeros(b.raw_dim());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.iter().map(|v| v * v).sum::<f64>();
    for _ in 0..max_iter {
        let r_inf = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if r_inf <= target {
            if project_mean {
                let m = x.mean().unwrap();
                x -= m;
            }
            return Ok(x);
        }
        let mut ap = apply(&p);
        if project_mean {
            let m = ap.mean().unwrap();
            ap -= m;
        }
        let alpha = rs / p.iter().zip(ap.iter()).map(|(a, b)| a * b).sum::<f64>();
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_new = r.iter().map(|v| v * v).sum::<f64>();
        let beta = rs_new / rs;
        rs = rs_new;
        p = &r + &(p * beta);
    }
    let r_inf = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Err(PlomError::SolverNonConvergence {
        time_index: 0,
        detail: format!("CG stalled with residual {r_inf:.3e} (target {target:.3e})"),
    })
}

/// One projection step of the cavity solver; returns the post-step fields.
fn ns_step(cfg: &CavityConfig, fields: &mut Fields, dt: f64, lid: f64, re: f64) -> Result<()> {
    let (nx, ny) = (cfg.nx1, cfg.nx2);
    let (hx, hy) = (cfg.hx(), cfg.hy());
    set_velocity_bc(cfg, &mut fields.u, &mut fields.v, lid);

    // explicit convection
    let conv_u = convection_u(cfg, &fields.u, &fields.v);
    let conv_v = convection_v(cfg, &fields.u, &fields.v);
    let mut u_nl = Array2::zeros((nx - 1, ny));
    for iu in 0..nx - 1 {
        for j0 in 0..ny {
            u_nl[[iu, j0]] = fields.u[[iu + 1, j0 + 1]] - dt * conv_u[[iu, j0]];
        }
    }
    let mut v_nl = Array2::zeros((nx, ny - 1));
    for iv in 0..nx {
        for jv in 0..ny - 1 {
            v_nl[[iv, jv]] = fields.v[[iv + 1, jv + 1]] - dt * conv_v[[iv, jv]];
        }
    }

    // implicit viscosity: (I - (dt/Re) Lap) u^v = u_nl (+ lid lifting)
    let c = dt / re;
    let cap = cfg.lin_iter_factor * cfg.n_p();
    let apply_u = |x: &Array2<f64>| -> Array2<f64> {
        let (hx2, hy2) = (hx * hx, hy * hy);
        let mut y = Array2::zeros(x.raw_dim());
        for iu in 0..nx - 1 {
            for j0 in 0..ny {
                let center = x[[iu, j0]];
                let left = if iu == 0 { 0.0 } else { x[[iu - 1, j0]] };
                let right = if iu == nx - 2 { 0.0 } else { x[[iu + 1, j0]] };
                let down = if j0 == 0 { -center } else { x[[iu, j0 - 1]] };
                let up = if j0 == ny - 1 { -center } else { x[[iu, j0 + 1]] };
                let lap = (left + right - 2.0 * center) / hx2
                    + (down + up - 2.0 * center) / hy2;
                y[[iu, j0]] = center - c * lap;
            }
        }
        y
    };
    let mut rhs_u = u_nl;
    for iu in 0..nx - 1 {
        // inhomogeneous lid ghost contributes 2*lid/hy^2 at the top row
        rhs_u[[iu, ny - 1]] += c * 2.0 * lid / (hy * hy);
    }
    let u_v = conjugate_gradient(apply_u, &rhs_u, cfg.lin_tol, cap, false)?;

    let apply_v = |x: &Array2<f64>| -> Array2<f64> {
        let (hx2, hy2) = (hx * hx, hy * hy);
        let mut y = Array2::zeros(x.raw_dim());
        for iv in 0..nx {
            for jv in 0..ny - 1 {
                let center = x[[iv, jv]];
                let left = if iv == 0 { -center } else { x[[iv - 1, jv]] };
                let right = if iv == nx - 1 { -center } else { x[[iv + 1, jv]] };
                let down = if jv == 0 { 0.0 } else { x[[iv, jv - 1]] };
                let up = if jv == ny - 2 { 0.0 } else { x[[iv, jv + 1]] };
                let lap = (left + right - 2.0 * center) / hx2
                    + (down + up - 2.0 * center) / hy2;
                y[[iv, jv]] = center - c * lap;
            }
        }
        y
    };
    let v_v = conjugate_gradient(apply_v, &v_nl, cfg.lin_tol, cap, false)?;

    // pressure Poisson: Lap_neumann(phi) = div u^v, phi = dt * p
    let mut div = Array2::zeros((nx, ny));
    for i0 in 0..nx {
        for j0 in 0..ny {
            let ue = if i0 == nx - 1 { 0.0 } else { u_v[[i0, j0]] };
            let uw = if i0 == 0 { 0.0 } else { u_v[[i0 - 1, j0]] };
            let vn = if j0 == ny - 1 { 0.0 } else { v_v[[i0, j0]] };
            let vs = if j0 == 0 { 0.0 } else { v_v[[i0, j0 - 1]] };
            div[[i0, j0]] = (ue - uw) / hx + (vn - vs) / hy;
        }
    }
    let apply_p = |x: &Array2<f64>| -> Array2<f64> {
        let (hx2, hy2) = (hx * hx, hy * hy);
        let mut y = Array2::zeros(x.raw_dim());
        for i0 in 0..nx {
            for j0 in 0..ny {
                let center = x[[i0, j0]];
                let mut lap = 0.0;
                if i0 > 0 {
                    lap += (x[[i0 - 1, j0]] - center) / hx2;
                }
                if i0 < nx - 1 {
                    lap += (x[[i0 + 1, j0]] - center) / hx2;
                }
                if j0 > 0 {
                    lap += (x[[i0, j0 - 1]] - center) / hy2;
                }
                if j0 < ny - 1 {
                    lap += (x[[i0, j0 + 1]] - center) / hy2;
                }
                y[[i0, j0]] = -lap;
            }
        }
        y
    };
    let phi = conjugate_gradient(apply_p, &(-&div), cfg.lin_tol, cap, true)?;

    // velocity correction and state write-back
    for iu in 0..nx - 1 {
        for j0 in 0..ny {
            let grad = (phi[[iu + 1, j0]] - phi[[iu, j0]]) / hx;
            fields.u[[iu + 1, j0 + 1]] = u_v[[iu, j0]] - grad;
        }
    }
    for iv in 0..nx {
        for jv in 0..ny - 1 {
            let grad = (phi[[iv, jv + 1]] - phi[[iv, jv]]) / hy;
            fields.v[[iv + 1, jv + 1]] = v_v[[iv, jv]] - grad;
        }
    }
    for i0 in 0..nx {
        for j0 in 0..ny {
            fields.p[[i0 + 1, j0 + 1]] = phi[[i0, j0]] / dt;
        }
    }
    set_velocity_bc(cfg, &mut fields.u, &mut fields.v, lid);
    set_pressure_bc(cfg, &mut fields.p);
    Ok(())
}

/// Cavity model packed as a first-order SCM with state Y = (U1, U2, P).
#[derive(Debug, Clone)]
pub struct CavityModel {
    pub config: CavityConfig,
}

impl CavityModel {
    pub fn new(config: CavityConfig) -> Result<Self> {
        config.validate()?;
        Ok(CavityModel { config })
    }

    fn pack(&self, f: &Fields, out: &mut ndarray::ArrayViewMut1<f64>) {
        let cfg = &self.config;
        let (nx, ny) = (cfg.nx1, cfg.nx2);
        let mut k = 0;
        for iu in 0..nx - 1 {
            for j0 in 0..ny {
                out[k] = f.u[[iu + 1, j0 + 1]];
                k += 1;
            }
        }
        for iv in 0..nx {
            for jv in 0..ny - 1 {
                out[k] = f.v[[iv + 1, jv + 1]];
                k += 1;
            }
        }
        for i0 in 0..nx {
            for j0 in 0..ny {
                out[k] = f.p[[i0 + 1, j0 + 1]];
                k += 1;
            }
        }
    }

    /// Unpack a state vector into full ghost arrays (bcs unset).
    fn unpack(&self, y: ArrayView1<f64>) -> Fields {
        let cfg = &self.config;
        let (nx, ny) = (cfg.nx1, cfg.nx2);
        let mut f = Fields::zeros(cfg);
        let mut k = 0;
        for iu in 0..nx - 1 {
            for j0 in 0..ny {
                f.u[[iu + 1, j0 + 1]] = y[k];
                k += 1;
            }
        }
        for iv in 0..nx {
            for jv in 0..ny - 1 {
                f.v[[iv + 1, jv + 1]] = y[k];
                k += 1;
            }
        }
        for i0 in 0..nx {
            for j0 in 0..ny {
                f.p[[i0 + 1, j0 + 1]] = y[k];
                k += 1;
            }
        }
        f
    }

    /// Pressure block of a packed state as an `nx1 x nx2` cell-center field.
    pub fn pressure_field(&self, y: ArrayView1<f64>) -> Array2<f64> {
        let cfg = &self.config;
        let offset = cfg.n_u1() + cfg.n_u2();
        let mut p = Array2::zeros((cfg.nx1, cfg.nx2));
        let mut k = offset;
        for i0 in 0..cfg.nx1 {
            for j0 in 0..cfg.nx2 {
                p[[i0, j0]] = y[k];
                k += 1;
            }
        }
        p
    }

    /// Max discrete divergence over cells of a packed state.
    pub fn max_divergence(&self, y: ArrayView1<f64>) -> f64 {
        let cfg = &self.config;
        let f = self.unpack(y);
        let (nx, ny) = (cfg.nx1, cfg.nx2);
        let (hx, hy) = (cfg.hx(), cfg.hy());
        let mut worst = 0.0f64;
        for i in 1..=nx {
            for j in 1..=ny {
                let d = (f.u[[i, j]] - f.u[[i - 1, j]]) / hx + (f.v[[i, j]] - f.v[[i, j - 1]]) / hy;
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    /// Integrate with an explicit lid velocity and Reynolds number (prior
    /// bypass for tests and diagnostics).
    pub fn solve_physical(&self, lid: f64, re: f64, grid: &TimeGrid) -> Result<Trajectory> {
        let cfg = &self.config;
        let mut fields = Fields::zeros(cfg);
        let mut values = Array2::zeros((cfg.state_dim(), grid.n_time));
        for n in 1..=grid.n_time {
            ns_step(cfg, &mut fields, grid.dt, lid, re).map_err(|e| match e {
                PlomError::SolverNonConvergence { detail, .. } => {
                    PlomError::SolverNonConvergence { time_index: n, detail }
                }
                other => other,
            })?;
            self.pack(&fields, &mut values.column_mut(n - 1));
        }
        Ok(Trajectory {
            values,
            dvalues: None,
            ddvalues: None,
            order: DerivativeOrder::First,
            initial: self.initial_state(),
        })
    }
}

impl ScmModel for CavityModel {
    fn id(&self) -> &str {
        "cavity2d"
    }

    fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn derivative_order(&self) -> DerivativeOrder {
        DerivativeOrder::First
    }

    fn initial_state(&self) -> InitialState {
        InitialState {
            y0: Array1::zeros(self.config.state_dim()),
            dy0: None,
            ddy0: None,
        }
    }

    fn sample_prior(&self, rng: &mut ChaCha20Rng) -> Array1<f64> {
        array![StandardNormal.sample(rng), StandardNormal.sample(rng)]
    }

    fn solve(&self, w: ArrayView1<f64>, grid: &TimeGrid) -> Result<Trajectory> {
        let (lid, _nu, re) = prior_map(&self.config, w);
        self.solve_physical(lid, re, grid)
    }

    /// Recombined scheme residual at one sampling time.
    ///
    /// With the backward difference `U̇`, the previous velocity is recovered
    /// as `U - dt U̇` and the viscous intermediate as `U + dt ∇p`, so the
    /// three sub-step equations collapse to one algebraic identity whose
    /// defect is exactly the inner linear-solver residual.
    fn residual_point(
        &self,
        point: &StatePoint,
        w: ArrayView1<f64>,
        grid: &TimeGrid,
    ) -> Result<Array1<f64>> {
        let cfg = &self.config;
        let (nx, ny) = (cfg.nx1, cfg.nx2);
        let (hx, hy) = (cfg.hx(), cfg.hy());
        let dt = grid.dt;
        let (lid, _nu, re) = prior_map(cfg, w);
        let dy = point
            .dy
            .as_ref()
            .ok_or_else(|| PlomError::Shape("cavity residual needs the velocity rate".into()))?;

        let mut cur = self.unpack(point.y.view());
        set_velocity_bc(cfg, &mut cur.u, &mut cur.v, lid);
        set_pressure_bc(cfg, &mut cur.p);
        let rate = self.unpack(dy.view());

        // previous velocity from the backward difference
        let mut prev = Fields::zeros(cfg);
        for iu in 0..nx - 1 {
            for j0 in 0..ny {
                prev.u[[iu + 1, j0 + 1]] =
                    cur.u[[iu + 1, j0 + 1]] - dt * rate.u[[iu + 1, j0 + 1]];
            }
        }
        for iv in 0..nx {
            for jv in 0..ny - 1 {
                prev.v[[iv + 1, jv + 1]] =
                    cur.v[[iv + 1, jv + 1]] - dt * rate.v[[iv + 1, jv + 1]];
            }
        }
        set_velocity_bc(cfg, &mut prev.u, &mut prev.v, lid);
        let conv_u = convection_u(cfg, &prev.u, &prev.v);
        let conv_v = convection_v(cfg, &prev.u, &prev.v);

        // viscous intermediate u^v = u + dt grad p
        let mut visc = Fields::zeros(cfg);
        for iu in 0..nx - 1 {
            let i = iu + 1;
            for j0 in 0..ny {
                let j = j0 + 1;
                visc.u[[i, j]] =
                    cur.u[[i, j]] + dt * (cur.p[[i + 1, j]] - cur.p[[i, j]]) / hx;
            }
        }
        for iv in 0..nx {
            let i = iv + 1;
            for jv in 0..ny - 1 {
                let j = jv + 1;
                visc.v[[i, j]] =
                    cur.v[[i, j]] + dt * (cur.p[[i, j + 1]] - cur.p[[i, j]]) / hy;
            }
        }
        set_velocity_bc(cfg, &mut visc.u, &mut visc.v, lid);
        let lap_u = laplacian_u(cfg, &visc.u);
        let lap_v = laplacian_v(cfg, &visc.v);

        let mut r = Array1::zeros(cfg.state_dim());
        let mut k = 0;
        for iu in 0..nx - 1 {
            let i = iu + 1;
            for j0 in 0..ny {
                let j = j0 + 1;
                let grad_p = (cur.p[[i + 1, j]] - cur.p[[i, j]]) / hx;
                r[k] = rate.u[[i, j]] + conv_u[[iu, j0]] + grad_p - lap_u[[iu, j0]] / re;
                k += 1;
            }
        }
        for iv in 0..nx {
            let i = iv + 1;
            for jv in 0..ny - 1 {
                let j = jv + 1;
                let grad_p = (cur.p[[i, j + 1]] - cur.p[[i, j]]) / hy;
                r[k] = rate.v[[i, j]] + conv_v[[iv, jv]] + grad_p - lap_v[[iv, jv]] / re;
                k += 1;
            }
        }
        for i in 1..=nx {
            for j in 1..=ny {
                r[k] = (cur.u[[i, j]] - cur.u[[i - 1, j]]) / hx
                    + (cur.v[[i, j]] - cur.v[[i, j - 1]]) / hy;
                k += 1;
            }
        }
        Ok(r)
    }

    fn residual_norm(&self) -> ResidualNorm {
        ResidualNorm::Blocks(vec![self.config.n_u1(), self.config.n_u2(), self.config.n_p()])
    }
}
