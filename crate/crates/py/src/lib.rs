//! Python bindings: the main types and operations of the learning pipeline
//! exposed with plain-list interfaces (samples are lists of points, each
//! point a list of floats).

use ndarray::{Array1, Array2};
use plom::constraints::Algo;
use plom::diffusion::{build_diffusion_basis, default_eps_diff, diffusion_spectrum, suggest_m};
use plom::grid::TimeGrid;
use plom::kde::KdeModel;
use plom::models::{CavityConfig, CavityModel, DuffingConfig, DuffingModel};
use plom::pipeline::{Pipeline, PipelineConfig};
use plom::sampler::{sample_unconstrained, IsdeParams};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::{Path, PathBuf};

fn err(e: plom::PlomError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Columns-of-points list (`n_points x dim`) into a `dim x n_points` matrix.
fn points_to_matrix(points: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    if points.is_empty() {
        return Err(PyValueError::new_err("empty point list"));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(PyValueError::new_err("points must share a positive dimension"));
    }
    let mut m = Array2::zeros((dim, points.len()));
    for (l, p) in points.iter().enumerate() {
        for (k, &v) in p.iter().enumerate() {
            m[[k, l]] = v;
        }
    }
    Ok(m)
}

fn matrix_to_points(m: &Array2<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols()).map(|l| m.column(l).to_vec()).collect()
}

/// Silverman bandwidth pair (s, s_hat) for N_d samples in dimension nu.
#[pyfunction]
fn bandwidths(n_d: usize, nu: usize) -> PyResult<(f64, f64)> {
    if n_d == 0 || nu == 0 {
        return Err(PyValueError::new_err("n_d and nu must be positive"));
    }
    Ok(plom::kde::bandwidths(n_d, nu))
}

/// Gaussian mixture density of a whitened sample cloud.
#[pyclass]
struct KernelDensity {
    inner: KdeModel,
}

#[pymethods]
impl KernelDensity {
    #[new]
    fn new(points: Vec<Vec<f64>>) -> PyResult<Self> {
        let eta = points_to_matrix(points)?;
        Ok(KernelDensity { inner: KdeModel::new(&eta.view()).map_err(err)? })
    }

    #[getter]
    fn s(&self) -> f64 {
        self.inner.s
    }

    #[getter]
    fn s_hat(&self) -> f64 {
        self.inner.s_hat
    }

    fn zeta(&self, point: Vec<f64>) -> PyResult<f64> {
        self.check_dim(&point)?;
        Ok(self.inner.zeta(Array1::from_vec(point).view()))
    }

    fn grad_log_zeta(&self, point: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_dim(&point)?;
        Ok(self.inner.grad_log_zeta(Array1::from_vec(point).view()).to_vec())
    }

    fn mixture_mean(&self) -> Vec<f64> {
        self.inner.mixture_mean().to_vec()
    }

    fn mixture_cov(&self) -> Vec<Vec<f64>> {
        let c = self.inner.mixture_cov();
        (0..c.nrows()).map(|i| c.row(i).to_vec()).collect()
    }

    /// Generate latent realizations from the ISDE generator (lambda = 0).
    #[pyo3(signature = (n_mc, m=None, eps_diff=None, seed=0))]
    fn sample(
        &self,
        n_mc: usize,
        m: Option<usize>,
        eps_diff: Option<f64>,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let eta = self.inner.eta_d().to_owned();
        let eps = eps_diff.unwrap_or_else(|| default_eps_diff(&eta.view()));
        let m = match m {
            Some(m) => m,
            None => {
                let spectrum = diffusion_spectrum(&eta.view(), eps).map_err(err)?;
                suggest_m(&spectrum, 0.1)
            }
        };
        let basis = build_diffusion_basis(&eta.view(), eps, m).map_err(err)?;
        let params = IsdeParams {
            n_mc,
            seed_v0: seed.wrapping_add(1),
            seed_wiener: seed.wrapping_add(2),
            seed_j0: seed.wrapping_add(3),
            ..Default::default()
        };
        let out = sample_unconstrained(&self.inner, &basis, &params).map_err(err)?;
        Ok(matrix_to_points(&out.eta))
    }
}

impl KernelDensity {
    fn check_dim(&self, point: &[f64]) -> PyResult<()> {
        if point.len() != self.inner.nu() {
            return Err(PyValueError::new_err(format!(
                "point has dimension {}, expected {}",
                point.len(),
                self.inner.nu()
            )));
        }
        Ok(())
    }
}

/// Diffusion-maps basis of a point cloud.
#[pyclass]
struct DiffusionMap {
    kappa: Vec<f64>,
    m: usize,
    eps_diff: f64,
}

#[pymethods]
impl DiffusionMap {
    #[new]
    #[pyo3(signature = (points, eps_diff=None, m=None))]
    fn new(points: Vec<Vec<f64>>, eps_diff: Option<f64>, m: Option<usize>) -> PyResult<Self> {
        let eta = points_to_matrix(points)?;
        let eps = eps_diff.unwrap_or_else(|| default_eps_diff(&eta.view()));
        let m = match m {
            Some(m) => m,
            None => {
                let spectrum = diffusion_spectrum(&eta.view(), eps).map_err(err)?;
                suggest_m(&spectrum, 0.1)
            }
        };
        let basis = build_diffusion_basis(&eta.view(), eps, m).map_err(err)?;
        Ok(DiffusionMap {
            kappa: basis.kappa.to_vec(),
            m: basis.m(),
            eps_diff: eps,
        })
    }

    #[getter]
    fn kappa(&self) -> Vec<f64> {
        self.kappa.clone()
    }

    #[getter]
    fn m(&self) -> usize {
        self.m
    }

    #[getter]
    fn eps_diff(&self) -> f64 {
        self.eps_diff
    }
}

/// The Duffing oscillator application model.
#[pyclass]
struct Duffing {
    inner: DuffingModel,
}

#[pymethods]
impl Duffing {
    #[new]
    #[pyo3(signature = (gamma0=1.0))]
    fn new(gamma0: f64) -> PyResult<Self> {
        let cfg = DuffingConfig { gamma0, ..Default::default() };
        Ok(Duffing { inner: DuffingModel::new(cfg).map_err(err)? })
    }

    /// Integrate for a control draw; returns (times, displacement).
    #[pyo3(signature = (w1, w2, n_time=1024))]
    fn solve(&self, w1: f64, w2: f64, n_time: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let grid = self.inner.config.desk_grid(n_time).map_err(err)?;
        let w = ndarray::array![w1, w2];
        let traj = plom::scm::solve_scm(&self.inner, w.view(), &grid).map_err(err)?;
        let times = (1..=n_time).map(|n| grid.time(n)).collect();
        Ok((times, traj.values.row(0).to_vec()))
    }

    fn excitation(&self, t: f64, w2: f64) -> f64 {
        self.inner.excitation(t, w2)
    }

    fn g1(&self, w1: f64) -> f64 {
        self.inner.g1(w1)
    }

    fn g2(&self, w2: f64) -> f64 {
        self.inner.g2(w2)
    }
}

/// The lid-driven cavity application model.
#[pyclass]
struct Cavity {
    inner: CavityModel,
}

#[pymethods]
impl Cavity {
    #[new]
    #[pyo3(signature = (nx1=16, nx2=18))]
    fn new(nx1: usize, nx2: usize) -> PyResult<Self> {
        let cfg = CavityConfig { nx1, nx2, ..Default::default() };
        Ok(Cavity { inner: CavityModel::new(cfg).map_err(err)? })
    }

    /// (V_CFD, nu_CFD, Re) of a standard-normal control draw.
    fn prior_map(&self, w1: f64, w2: f64) -> (f64, f64, f64) {
        plom::models::cavity::prior_map(&self.inner.config, ndarray::array![w1, w2].view())
    }

    /// Integrate n_time steps; returns the max post-projection divergence
    /// of the final state and the pressure field as a nested list.
    #[pyo3(signature = (w1, w2, n_time=50, dt=0.03))]
    fn solve(&self, w1: f64, w2: f64, n_time: usize, dt: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
        let grid = TimeGrid::new(0.0, dt, n_time).map_err(err)?;
        let w = ndarray::array![w1, w2];
        let traj = plom::scm::solve_scm(&self.inner, w.view(), &grid).map_err(err)?;
        let last = traj.values.column(n_time - 1);
        let div = self.inner.max_divergence(last);
        let p = self.inner.pressure_field(last);
        let rows = (0..p.nrows()).map(|i| p.row(i).to_vec()).collect();
        Ok((div, rows))
    }
}

/// Run the full pipeline from a TOML config; returns (stage, computed) pairs.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir=None))]
fn run_pipeline(config_path: &str, out_dir: Option<&str>) -> PyResult<Vec<(String, bool)>> {
    let config = PipelineConfig::load(Path::new(config_path)).map_err(err)?;
    let out = out_dir.map(PathBuf::from);
    let pipeline = Pipeline::new(config, out.as_deref()).map_err(err)?;
    let summary = pipeline.run_all().map_err(err)?;
    Ok(summary.stages)
}

/// Run one constrained learning stage from a config (algo 1, 2, or 3).
#[pyfunction]
#[pyo3(signature = (config_path, algo, out_dir=None))]
fn run_constrained(config_path: &str, algo: u8, out_dir: Option<&str>) -> PyResult<bool> {
    let config = PipelineConfig::load(Path::new(config_path)).map_err(err)?;
    let out = out_dir.map(PathBuf::from);
    let pipeline = Pipeline::new(config, out.as_deref()).map_err(err)?;
    let (_, computed) = pipeline
        .learn_constrained(Algo::from_id(algo).map_err(err)?)
        .map_err(err)?;
    Ok(computed)
}

#[pymodule]
fn plom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bandwidths, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_constrained, m)?)?;
    m.add_class::<KernelDensity>()?;
    m.add_class::<DiffusionMap>()?;
    m.add_class::<Duffing>()?;
    m.add_class::<Cavity>()?;
    Ok(())
}
