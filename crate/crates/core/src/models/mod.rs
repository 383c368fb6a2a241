//! Concrete stochastic computational models.

pub mod cavity;
pub mod duffing;
pub mod linear;

pub use cavity::{CavityConfig, CavityModel};
pub use duffing::{DuffingConfig, DuffingModel};
pub use linear::LinearDecay;
