//! Abstract stochastic computational model (SCM), training-dataset
//! generation, and empirical second-order statistics.

use crate::grid::TimeGrid;
use crate::{PlomError, Result};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

/// Order of the time-differential operator of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeOrder {
    First,
    Second,
}

impl DerivativeOrder {
    pub fn m_d(&self) -> usize {
        match self {
            DerivativeOrder::First => 1,
            DerivativeOrder::Second => 2,
        }
    }
}

/// Deterministic initial condition at `t0` (all models here start every
/// realization from the same state; derivative seeds up to the model order).
#[derive(Debug, Clone)]
pub struct InitialState {
    pub y0: Array1<f64>,
    pub dy0: Option<Array1<f64>>,
    pub ddy0: Option<Array1<f64>>,
}

impl InitialState {
    pub fn rest(n: usize, order: DerivativeOrder) -> Self {
        InitialState {
            y0: Array1::zeros(n),
            dy0: Some(Array1::zeros(n)),
            ddy0: match order {
                DerivativeOrder::First => None,
                DerivativeOrder::Second => Some(Array1::zeros(n)),
            },
        }
    }
}

/// State (and derivatives up to the model order) at one sampling time.
#[derive(Debug, Clone)]
pub struct StatePoint {
    /// 1-based grid index.
    pub index: usize,
    pub t: f64,
    pub y: Array1<f64>,
    pub dy: Option<Array1<f64>>,
    pub ddy: Option<Array1<f64>>,
}

/// Norm used when collapsing a residual vector to a scalar per time.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualNorm {
    /// `||r|| / sqrt(N)`.
    Plain,
    /// Block norm `sqrt(sum_b ||r_b||^2 / N_b^2)` with the given block sizes.
    Blocks(Vec<usize>),
}

/// A nonlinear stochastic computational model with deterministic initial
/// conditions: a residual operator, a prior on the control parameter, and a
/// solver advancing the discrete equations on a uniform grid.
pub trait ScmModel: Send + Sync {
    fn id(&self) -> &str;

    /// State dimension N.
    fn state_dim(&self) -> usize;

    /// Control-parameter dimension n_w.
    fn control_dim(&self) -> usize;

    fn derivative_order(&self) -> DerivativeOrder;

    /// Deterministic initial condition shared by all realizations.
    fn initial_state(&self) -> InitialState;

    /// One prior draw of the control parameter, inside its support.
    fn sample_prior(&self, rng: &mut ChaCha20Rng) -> Array1<f64>;

    /// Whether `w` lies in the prior support.
    fn in_support(&self, _w: ArrayView1<f64>) -> bool {
        true
    }

    /// Integrate the model over the grid with its own scheme, populating
    /// derivative stacks up to the model order where the scheme defines them.
    fn solve(&self, w: ArrayView1<f64>, grid: &TimeGrid) -> Result<Trajectory>;

    /// Residual operator evaluated with the model's own discretization at one
    /// sampling time.
    fn residual_point(
        &self,
        point: &StatePoint,
        w: ArrayView1<f64>,
        grid: &TimeGrid,
    ) -> Result<Array1<f64>>;

    fn residual_norm(&self) -> ResidualNorm {
        ResidualNorm::Plain
    }
}

/// Time sampling of one realization, column `n-1` holding `y(t_n)`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub values: Array2<f64>,
    /// First-derivative stack, populated by second-order solvers.
    pub dvalues: Option<Array2<f64>>,
    /// Second-derivative stack, populated by second-order solvers.
    pub ddvalues: Option<Array2<f64>>,
    pub order: DerivativeOrder,
    pub initial: InitialState,
}

impl Trajectory {
    pub fn state_dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.values.ncols()
    }

    pub fn all_finite(&self) -> bool {
        let stacks = [Some(&self.values), self.dvalues.as_ref(), self.ddvalues.as_ref()];
        stacks
            .into_iter()
            .flatten()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// State with derivatives at 1-based grid index `n`.
    ///
    /// First-order models fall back to the backward difference
    /// `(y(t_n) - y(t_{n-1}))/dt`, which is the scheme used to propagate
    /// their reduced bases as well; second-order models require stored
    /// stacks.
    pub fn point(&self, n: usize, grid: &TimeGrid) -> Result<StatePoint> {
        if n < 1 || n > self.n_time() {
            return Err(PlomError::Shape(format!(
                "time index {n} outside 1..={}",
                self.n_time()
            )));
        }
        let y = self.values.column(n - 1).to_owned();
        let (dy, ddy) = match self.order {
            DerivativeOrder::First => {
                let dy = match &self.dvalues {
                    Some(d) => d.column(n - 1).to_owned(),
                    None => {
                        let prev = if n == 1 {
                            self.initial.y0.clone()
                        } else {
                            self.values.column(n - 2).to_owned()
                        };
                        (&y - &prev) / grid.dt
                    }
                };
                (Some(dy), None)
            }
            DerivativeOrder::Second => {
                let dv = self.dvalues.as_ref().ok_or_else(|| {
                    PlomError::Shape("second-order trajectory missing first-derivative stack".into())
                })?;
                let ddv = self.ddvalues.as_ref().ok_or_else(|| {
                    PlomError::Shape("second-order trajectory missing second-derivative stack".into())
                })?;
                (
                    Some(dv.column(n - 1).to_owned()),
                    Some(ddv.column(n - 1).to_owned()),
                )
            }
        };
        Ok(StatePoint {
            index: n,
            t: grid.time(n),
            y,
            dy,
            ddy,
        })
    }
}

/// The training dataset: `N_d` (trajectory, control) pairs on a shared grid.
#[derive(Debug, Clone)]
pub struct TrainingDataset {
    pub grid: TimeGrid,
    pub pairs: Vec<(Trajectory, Array1<f64>)>,
    pub seed: u64,
}

impl TrainingDataset {
    pub fn n_d(&self) -> usize {
        self.pairs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.pairs[0].0.state_dim()
    }

    /// Controls as an `n_w x N_d` matrix.
    pub fn controls(&self) -> Array2<f64> {
        let n_w = self.pairs[0].1.len();
        let mut w = Array2::zeros((n_w, self.n_d()));
        for (l, (_, wl)) in self.pairs.iter().enumerate() {
            w.column_mut(l).assign(wl);
        }
        w
    }
}

/// Derive an independent, reproducible RNG stream for a sample index.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(b"plom-scm");
    ChaCha20Rng::from_seed(key)
}

/// Solve the model for one control draw, with pre/post validation.
pub fn solve_scm(
    model: &dyn ScmModel,
    w: ArrayView1<f64>,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    if w.len() != model.control_dim() {
        return Err(PlomError::Shape(format!(
            "control vector has length {}, model expects {}",
            w.len(),
            model.control_dim()
        )));
    }
    if !model.in_support(w) {
        return Err(PlomError::Config("control parameter outside prior support".into()));
    }
    let traj = model.solve(w, grid)?;
    if !traj.all_finite() {
        return Err(PlomError::NonFinite {
            context: format!("trajectory of model `{}`", model.id()),
        });
    }
    Ok(traj)
}

/// Draw `n` prior samples as columns, deterministically from the seed.
pub fn sample_prior_many(model: &dyn ScmModel, n: usize, seed: u64) -> Array2<f64> {
    let n_w = model.control_dim();
    let mut w = Array2::zeros((n_w, n));
    for l in 0..n {
        let mut rng = stream_rng(seed, l as u64);
        w.column_mut(l).assign(&model.sample_prior(&mut rng));
    }
    w
}

/// Generate the training dataset: `n_d` independent prior draws and their
/// solved trajectories. Solves run in parallel; output order and content are
/// a pure function of `(model, n_d, grid, seed)`.
pub fn build_training_dataset(
    model: &dyn ScmModel,
    n_d: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<TrainingDataset> {
    if n_d < 2 {
        return Err(PlomError::Config(format!("training dataset needs N_d >= 2, got {n_d}")));
    }
    let pairs: Vec<Result<(Trajectory, Array1<f64>)>> = (0..n_d)
        .into_par_iter()
        .map(|l| {
            let mut rng = stream_rng(seed, l as u64);
            let w = model.sample_prior(&mut rng);
            let traj = solve_scm(model, w.view(), grid).map_err(|e| PlomError::SampleFailed {
                sample: l,
                source: Box::new(e),
            })?;
            Ok((traj, w))
        })
        .collect();
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TrainingDataset {
        grid: grid.clone(),
        pairs,
        seed,
    })
}

/// Ensemble mean per (component, time) and the centered trajectories.
pub fn empirical_mean_traj(dataset: &TrainingDataset) -> (Array2<f64>, Vec<Array2<f64>>) {
    let n_d = dataset.n_d();
    assert!(n_d >= 2, "empirical statistics need N_d >= 2");
    let shape = dataset.pairs[0].0.values.raw_dim();
    let mut mean = Array2::<f64>::zeros(shape);
    for (traj, _) in &dataset.pairs {
        mean += &traj.values;
    }
    mean /= n_d as f64;
    let centered = dataset
        .pairs
        .iter()
        .map(|(traj, _)| &traj.values - &mean)
        .collect();
    (mean, centered)
}

/// Ensemble-mean state norm per time, used by the largest-amplitude
/// subsampling strategy.
pub fn mean_state_norms(dataset: &TrainingDataset) -> Vec<f64> {
    let n_time = dataset.pairs[0].0.n_time();
    let n_d = dataset.n_d() as f64;
    (0..n_time)
        .map(|n| {
            dataset
                .pairs
                .iter()
                .map(|(t, _)| t.values.index_axis(Axis(1), n).mapv(|v| v * v).sum().sqrt())
                .sum::<f64>()
                / n_d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::linear::LinearDecay;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy_dataset(values: Vec<Array2<f64>>) -> TrainingDataset {
        let n_time = values[0].ncols();
        let grid = TimeGrid::new(0.0, 0.1, n_time).unwrap();
        let pairs = values
            .into_iter()
            .map(|v| {
                let n = v.nrows();
                (
                    Trajectory {
                        values: v,
                        dvalues: None,
                        ddvalues: None,
                        order: DerivativeOrder::First,
                        initial: InitialState::rest(n, DerivativeOrder::First),
                    },
                    array![0.0],
                )
            })
            .collect();
        TrainingDataset { grid, pairs, seed: 0 }
    }

    #[test]
    fn mean_of_mirror_pair_is_zero() {
        let y = array![[1.0, -2.0, 3.0], [0.5, 0.0, -0.5]];
        let ds = toy_dataset(vec![y.clone(), -y]);
        let (mean, centered) = empirical_mean_traj(&ds);
        assert!(mean.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(centered.len(), 2);
    }

    #[test]
    fn identical_copies_center_to_zero() {
        let y = array![[1.0, 2.0], [3.0, 4.0]];
        let ds = toy_dataset(vec![y.clone(), y.clone(), y]);
        let (_, centered) = empirical_mean_traj(&ds);
        for c in centered {
            assert!(c.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn mean_matches_loop_oracle() {
        // 2 components x 3 times x 4 realizations, explicit averaging oracle
        let mut vals = Vec::new();
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..4 {
            vals.push(Array2::from_shape_fn((2, 3), |_| next()));
        }
        let ds = toy_dataset(vals.clone());
        let (mean, centered) = empirical_mean_traj(&ds);
        for i in 0..2 {
            for n in 0..3 {
                let mut acc = 0.0;
                for v in &vals {
                    acc += v[[i, n]];
                }
                assert_abs_diff_eq!(mean[[i, n]], acc / 4.0, epsilon = 1e-14);
                let mut csum = 0.0;
                for c in &centered {
                    csum += c[[i, n]];
                }
                assert!(csum.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let model = LinearDecay::default();
        let grid = TimeGrid::new(0.0, 0.05, 20).unwrap();
        let a = build_training_dataset(&model, 3, &grid, 42).unwrap();
        let b = build_training_dataset(&model, 3, &grid, 42).unwrap();
        for ((ta, wa), (tb, wb)) in a.pairs.iter().zip(b.pairs.iter()) {
            assert_eq!(ta.values, tb.values);
            assert_eq!(wa, wb);
        }
        let c = build_training_dataset(&model, 3, &grid, 43).unwrap();
        assert_ne!(a.pairs[0].1, c.pairs[0].1);
    }

    #[test]
    fn backward_difference_point_uses_initial_state() {
        let grid = TimeGrid::new(0.0, 0.5, 2).unwrap();
        let mut initial = InitialState::rest(1, DerivativeOrder::First);
        initial.y0 = array![2.0];
        let traj = Trajectory {
            values: array![[3.0, 5.0]],
            dvalues: None,
            ddvalues: None,
            order: DerivativeOrder::First,
            initial,
        };
        let p1 = traj.point(1, &grid).unwrap();
        assert_abs_diff_eq!(p1.dy.unwrap()[0], (3.0 - 2.0) / 0.5, epsilon = 1e-15);
        let p2 = traj.point(2, &grid).unwrap();
        assert_abs_diff_eq!(p2.dy.unwrap()[0], (5.0 - 3.0) / 0.5, epsilon = 1e-15);
    }
}
