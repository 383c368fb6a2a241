//! Scalar linear decay model, mainly for testing the SCM plumbing.
//!
//! `dy/dt + rate(w) * y = 0`, `y(t0) = y0`, with a lognormal rate
//! `rate(w) = exp(sigma_w * w)` driven by a standard-normal control.
//! Integrated by the trapezoidal (Crank-Nicolson) rule; the residual
//! operator evaluates the same discretization, so solver output has
//! machine-zero residual.

use crate::grid::TimeGrid;
use crate::scm::{DerivativeOrder, InitialState, ScmModel, StatePoint, Trajectory};
use crate::Result;
use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct LinearDecay {
    pub y0: f64,
    pub sigma_w: f64,
}

impl Default for LinearDecay {
    fn default() -> Self {
        LinearDecay { y0: 1.0, sigma_w: 0.2 }
    }
}

impl LinearDecay {
    fn rate(&self, w: ArrayView1<f64>) -> f64 {
        (self.sigma_w * w[0]).exp()
    }
}

impl ScmModel for LinearDecay {
    fn id(&self) -> &str {
        "linear-decay"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn derivative_order(&self) -> DerivativeOrder {
        DerivativeOrder::First
    }

    fn initial_state(&self) -> InitialState {
        InitialState {
            y0: Array1::from_elem(1, self.y0),
            dy0: None,
            ddy0: None,
        }
    }

    fn sample_prior(&self, rng: &mut ChaCha20Rng) -> Array1<f64> {
        Array1::from_elem(1, StandardNormal.sample(rng))
    }

    fn solve(&self, w: ArrayView1<f64>, grid: &TimeGrid) -> Result<Trajectory> {
        let rate = self.rate(w);
        let step = (1.0 - rate * grid.dt / 2.0) / (1.0 + rate * grid.dt / 2.0);
        let mut values = Array2::zeros((1, grid.n_time));
        let mut y = self.y0;
        for n in 0..grid.n_time {
            y *= step;
            values[[0, n]] = y;
        }
        Ok(Trajectory {
            values,
            dvalues: None,
            ddvalues: None,
            order: DerivativeOrder::First,
            initial: self.initial_state(),
        })
    }

    fn residual_point(
        &self,
        point: &StatePoint,
        w: ArrayView1<f64>,
        grid: &TimeGrid,
    ) -> Result<Array1<f64>> {
        let rate = self.rate(w);
        let y = point.y[0];
        let dy = point.dy.as_ref().expect("first-order point has dy")[0];
        // trapezoid average reconstructed from the backward difference
        let y_prev = y - grid.dt * dy;
        Ok(Array1::from_elem(1, dy + rate * (y + y_prev) / 2.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::solve_scm;
    use ndarray::array;

    #[test]
    fn matches_analytic_decay_at_second_order() {
        let model = LinearDecay::default();
        // rate(0) = 1: dy/dt = -y, y(0) = 1
        let w = array![0.0];
        let mut errs = Vec::new();
        for &n_time in &[50usize, 100, 200] {
            let grid = TimeGrid::from_span(0.0, 1.0, 1.0 / n_time as f64, n_time).unwrap();
            let traj = solve_scm(&model, w.view(), &grid).unwrap();
            let mut max_err: f64 = 0.0;
            for n in 1..=n_time {
                let exact = (-grid.time(n)).exp();
                max_err = max_err.max((traj.values[[0, n - 1]] - exact).abs());
            }
            errs.push(max_err);
        }
        // halving dt divides the error by ~4 (second order)
        assert!(errs[0] / errs[1] > 3.5 && errs[0] / errs[1] < 4.5);
        assert!(errs[1] / errs[2] > 3.5 && errs[1] / errs[2] < 4.5);
        assert!(errs[2] < 1e-5);
    }

    #[test]
    fn own_solution_has_machine_zero_residual() {
        let model = LinearDecay::default();
        let grid = TimeGrid::new(0.0, 0.05, 40).unwrap();
        let w = array![0.7];
        let traj = solve_scm(&model, w.view(), &grid).unwrap();
        for n in 1..=grid.n_time {
            let p = traj.point(n, &grid).unwrap();
            let r = model.residual_point(&p, w.view(), &grid).unwrap();
            assert!(r[0].abs() < 1e-13, "residual {} at n={}", r[0], n);
        }
    }
}
