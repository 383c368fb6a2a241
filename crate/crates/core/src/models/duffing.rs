//! Scalar Duffing oscillator with nonstationary random excitation and a
//! two-dimensional Gaussian control parameter.
//!
//! `ÿ + 2 χ_d g_1(W_1) ẏ + g_1(W_1)² (1 + k_b y²) y = γ(t, W_2)`, started
//! at rest. Integrated by the implicit centered Newmark scheme with a
//! fixed-point inner loop; the residual operator evaluates the same
//! equation on Newmark-consistent derivative stacks.

use crate::grid::TimeGrid;
use crate::scm::{DerivativeOrder, InitialState, ScmModel, StatePoint, Trajectory};
use crate::{PlomError, Result};
use ndarray::{array, Array1, Array2, ArrayView1};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erf;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DuffingConfig {
    pub chi_d: f64,
    pub k_b: f64,
    pub t_end: f64,
    pub omega_b: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub gbar_1: f64,
    pub gbar_2: f64,
    /// Excitation amplitude scale.
    pub gamma0: f64,
    /// Relative tolerance of the fixed-point inner loop.
    pub fp_tol: f64,
    pub fp_max_iter: usize,
}

impl Default for DuffingConfig {
    fn default() -> Self {
        let omega_b = 2.0 * std::f64::consts::PI * 100.0;
        DuffingConfig {
            chi_d: 0.05,
            k_b: 5e8,
            t_end: 0.7325,
            omega_b,
            delta_1: 0.2,
            delta_2: 0.2,
            gbar_1: omega_b,
            gbar_2: 6.0,
            gamma0: 1.0,
            fp_tol: 1e-6,
            fp_max_iter: 50,
        }
    }
}

impl DuffingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.chi_d, self.k_b, self.t_end, self.omega_b, self.delta_1, self.delta_2,
            self.gbar_1, self.gbar_2, self.fp_tol,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.gamma0 < 0.0 {
            return Err(PlomError::Config("Duffing parameters must be positive".into()));
        }
        Ok(())
    }

    /// Reference grid: dt = 2.5e-4 s over [0, t_end], 2930 steps.
    pub fn reference_grid(&self) -> Result<TimeGrid> {
        let dt = 2.5e-4;
        let n_time = (self.t_end / dt).round() as usize;
        TimeGrid::from_span(0.0, self.t_end, dt, n_time)
    }

    /// Grid with a reduced number of steps over the same span.
    pub fn desk_grid(&self, n_time: usize) -> Result<TimeGrid> {
        TimeGrid::from_span(0.0, self.t_end, self.t_end / n_time as f64, n_time)
    }
}

#[derive(Debug, Clone)]
pub struct DuffingModel {
    pub config: DuffingConfig,
}

impl DuffingModel {
    pub fn new(config: DuffingConfig) -> Result<Self> {
        config.validate()?;
        Ok(DuffingModel { config })
    }

    /// Uniform transform `U = (1 + erf(w/√2))/2` of a standard normal.
    fn uniform_of(w: f64) -> f64 {
        (1.0 + erf(w / std::f64::consts::SQRT_2)) / 2.0
    }

    /// `g_j(w) = ḡ_j (1 + √3 δ_j (2 U_j(w) - 1))`.
    pub fn g1(&self, w1: f64) -> f64 {
        self.config.gbar_1 * (1.0 + 3f64.sqrt() * self.config.delta_1 * (2.0 * Self::uniform_of(w1) - 1.0))
    }

    pub fn g2(&self, w2: f64) -> f64 {
        self.config.gbar_2 * (1.0 + 3f64.sqrt() * self.config.delta_2 * (2.0 * Self::uniform_of(w2) - 1.0))
    }

    /// Windowed nonstationary excitation; zero outside `(0, T)` by the
    /// continuous extension of the window factor.
    pub fn excitation(&self, t: f64, w2: f64) -> f64 {
        let cfg = &self.config;
        let x = 2.0 * t / cfg.t_end - 1.0;
        if t <= 0.0 || x.abs() >= 1.0 {
            return 0.0;
        }
        let window = (-1.0 / (1.0 - x.powi(4))).exp();
        let envelope = (t / cfg.t_end * self.g2(w2)).powi(2);
        cfg.gamma0 * envelope * (1.0 + 0.05 * (cfg.omega_b * t).sin()) * window
    }

    /// The oscillator residual with all derivatives supplied.
    pub fn rhs(&self, y: f64, dy: f64, ddy: f64, t: f64, w: ArrayView1<f64>) -> f64 {
        let g1 = self.g1(w[0]);
        ddy + 2.0 * self.config.chi_d * g1 * dy + g1 * g1 * (1.0 + self.config.k_b * y * y) * y
            - self.excitation(t, w[1])
    }
}

impl ScmModel for DuffingModel {
    fn id(&self) -> &str {
        "duffing"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn derivative_order(&self) -> DerivativeOrder {
        DerivativeOrder::Second
    }

    fn initial_state(&self) -> InitialState {
        // rest start; the excitation vanishes at t0 = 0 so ÿ(t0) = 0
        InitialState {
            y0: array![0.0],
            dy0: Some(array![0.0]),
            ddy0: Some(array![0.0]),
        }
    }

    fn sample_prior(&self, rng: &mut ChaCha20Rng) -> Array1<f64> {
        array![StandardNormal.sample(rng), StandardNormal.sample(rng)]
    }

    fn solve(&self, w: ArrayView1<f64>, grid: &TimeGrid) -> Result<Trajectory> {
        let cfg = &self.config;
        let dt = grid.dt;
        let a0 = 4.0 / (dt * dt);
        let a1 = 4.0 / dt;
        let a2 = 1.0;
        let a3 = dt / 2.0;
        let g1 = self.g1(w[0]);
        let g1sq = g1 * g1;
        let damp = 2.0 * cfg.chi_d * g1;
        let c_lin = a0 + damp * a3 * a0 + g1sq;

        let mut values = Array2::zeros((1, grid.n_time));
        let mut dvalues = Array2::zeros((1, grid.n_time));
        let mut ddvalues = Array2::zeros((1, grid.n_time));

        let mut y_prev = 0.0;
        let mut dy_prev = 0.0;
        let mut ddy_prev = self.excitation(grid.t0, w[1]);
        for n in 1..=grid.n_time {
            let t = grid.time(n);
            let gam = self.excitation(t, w[1]);
            let hist = a0 * y_prev + a1 * dy_prev + a2 * ddy_prev;
            let rhs_const = gam + hist - damp * (dy_prev + a3 * ddy_prev - a3 * hist);

            // fixed point on the cubic term, relative tolerance on the iterate
            let mut y = y_prev;
            let mut converged = false;
            for _ in 0..cfg.fp_max_iter {
                let y_next = (rhs_const - g1sq * cfg.k_b * y * y * y) / c_lin;
                let delta = (y_next - y).abs();
                y = y_next;
                if delta <= cfg.fp_tol * y.abs().max(1e-300) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(PlomError::SolverNonConvergence {
                    time_index: n,
                    detail: format!("fixed point stalled at y = {y:.6e}"),
                });
            }
            // two polish sweeps tighten the iterate well below the advertised
            // tolerance at negligible cost (the contraction factor is small)
            for _ in 0..2 {
                y = (rhs_const - g1sq * cfg.k_b * y * y * y) / c_lin;
            }
            if !y.is_finite() {
                return Err(PlomError::NonFinite {
                    context: format!("Duffing state at time index {n}"),
                });
            }
            let ddy = a0 * (y - y_prev) - a1 * dy_prev - a2 * ddy_prev;
            let dy = dy_prev + a3 * (ddy_prev + ddy);
            values[[0, n - 1]] = y;
            dvalues[[0, n - 1]] = dy;
            ddvalues[[0, n - 1]] = ddy;
            y_prev = y;
            dy_prev = dy;
            ddy_prev = ddy;
        }
        Ok(Trajectory {
            values,
            dvalues: Some(dvalues),
            ddvalues: Some(ddvalues),
            order: DerivativeOrder::Second,
            initial: self.initial_state(),
        })
    }

    fn residual_point(
        &self,
        point: &StatePoint,
        w: ArrayView1<f64>,
        _grid: &TimeGrid,
    ) -> Result<Array1<f64>> {
        let dy = point
            .dy
            .as_ref()
            .ok_or_else(|| PlomError::Shape("Duffing residual needs dy".into()))?[0];
        let ddy = point
            .ddy
            .as_ref()
            .ok_or_else(|| PlomError::Shape("Duffing residual needs ddy".into()))?[0];
        Ok(array![self.rhs(point.y[0], dy, ddy, point.t, w)])
    }
}
