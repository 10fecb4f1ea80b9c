//! Forward models: correlated Black–Scholes and rough Bergomi.

pub mod black_scholes;
pub mod quadrature;
pub mod rough_bergomi;
pub mod volterra;

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::Result;
use crate::grid::TimeGrid;
use crate::paths::PathBatch;
use crate::rng::SeedSpec;

pub use black_scholes::{simulate_bs_paths, BlackScholesModel};
pub use rough_bergomi::{simulate_rbergomi_paths, ForwardVariance, RoughBergomiModel};
pub use volterra::{build_volterra_plan, cholesky_volterra_oracle, VolterraKernelPlan};

/// A Markovian diffusion `dX = μ(t, X)dt + Σ(t, X)dW` started at a
/// deterministic point.
pub trait MarkovianModel: Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn initial_state(&self) -> Array1<f64>;
    fn simulate(&self, grid: &TimeGrid, n: usize, seeds: &SeedSpec) -> Result<PathBatch>;
    /// `out = Σ(t, x) v` for a noise-space vector `v`.
    fn diffusion_apply(&self, t: f64, x: ArrayView1<f64>, v: ArrayView1<f64>, out: &mut [f64]);
}

/// A model that can produce sample paths under the pricing measure.
pub trait PathModel: Sync {
    /// Risk-free rate used for discounting.
    fn rate(&self) -> f64;
    fn simulate_paths(&self, grid: &TimeGrid, n: usize, seeds: &SeedSpec) -> Result<PathBatch>;
    /// Terminal states of the paths with global indices `paths`, identical to
    /// the corresponding rows of [`PathModel::simulate_paths`] but without
    /// storing whole trajectories.
    fn terminal_states(&self, grid: &TimeGrid, paths: Range<usize>, seeds: &SeedSpec) -> Result<Array2<f64>>;
}
