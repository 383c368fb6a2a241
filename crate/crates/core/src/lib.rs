//! Probabilistic learning on manifolds (PLoM) for time-dependent stochastic
//! computational models.
//!
//! Given a small training set of solver trajectories paired with random
//! control parameters, this crate builds a reduced latent representation
//! (Karhunen-Loève + PCA whitening), estimates its density with a modified
//! Gaussian KDE, and generates arbitrarily many statistically consistent
//! realizations by integrating a dissipative Hamiltonian Itô SDE projected
//! on a diffusion-maps basis. Optionally, the generator is tilted by
//! Lagrange multipliers so the learned realizations minimize the
//! mean-square PDE residual while preserving the first two moments of the
//! control parameter.

pub mod constraints;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod io;
pub mod kde;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod reduction;
pub mod residual;
pub mod sampler;
pub mod scm;
pub mod stats;

pub use error::PlomError;
pub use grid::{Subsample, SubsampleSpec, TimeGrid};
pub use scm::{ScmModel, StatePoint, Trajectory, TrainingDataset};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PlomError>;
