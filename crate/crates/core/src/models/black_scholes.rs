use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::ops::Range;

use super::{MarkovianModel, PathModel};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::{correlation_factor, increments_with_factor, PathBatch};
use crate::rng::SeedSpec;

/// Correlated multi-asset geometric Brownian motion under the pricing measure.
///
/// Paths are stored as log-prices; `dw` holds the correlated increments, so the
/// log-state diffusion matrix is `diag(σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackScholesModel {
    s0: Vec<f64>,
    r: f64,
    sigma: Vec<f64>,
    corr: Vec<Vec<f64>>,
}

impl BlackScholesModel {
    pub fn new(s0: Vec<f64>, r: f64, sigma: Vec<f64>, corr: ArrayView2<f64>) -> Result<Self> {
        let d = s0.len();
        if d == 0 {
            return Err(Error::invalid("model needs at least one asset"));
        }
        if sigma.len() != d || corr.nrows() != d || corr.ncols() != d {
            return Err(Error::invalid("spot, volatility and correlation dimensions differ"));
        }
        if s0.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("spot prices must be positive"));
        }
        if sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("volatilities must be non-negative"));
        }
        if !r.is_finite() {
            return Err(Error::invalid("rate must be finite"));
        }
        correlation_factor(corr)?;
        Ok(Self {
            s0,
            r,
            sigma,
            corr: corr.outer_iter().map(|row| row.to_vec()).collect(),
        })
    }

    /// Independent assets.
    pub fn independent(s0: Vec<f64>, r: f64, sigma: Vec<f64>) -> Result<Self> {
        let d = s0.len();
        Self::new(s0, r, sigma, Array2::eye(d).view())
    }

    pub fn dim(&self) -> usize {
        self.s0.len()
    }

    pub fn spot(&self) -> &[f64] {
        &self.s0
    }

    pub fn rate(&self) -> f64 {
        self.r
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn correlation(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((d, d), |(i, j)| self.corr[i][j])
    }

    pub fn log_spot(&self) -> Array1<f64> {
        self.s0.iter().map(|s| s.ln()).collect()
    }
}

/// Log-Euler paths `X_{i+1} = X_i + (r − σ²/2)δ_i + σ ΔW_i`, exact in law for
/// geometric Brownian motion.
pub fn simulate_bs_paths(model: &BlackScholesModel, grid: &TimeGrid, n: usize, seeds: &SeedSpec) -> Result<PathBatch> {
    let factor = correlation_factor(model.correlation().view())?;
    let dw = increments_with_factor(grid, 0..n, factor.view(), seeds);
    let states = log_euler_states(model, grid, dw.view());
    Ok(PathBatch {
        states,
        variance: None,
        dw,
        volterra: None,
    })
}

/// Replays the log-Euler recursion on given increments.
pub fn log_euler_states(model: &BlackScholesModel, grid: &TimeGrid, dw: ndarray::ArrayView3<f64>) -> Array3<f64> {
    let (n, steps, d) = dw.dim();
    let x0 = model.log_spot();
    let drift: Vec<f64> = model.sigma.iter().map(|s| model.r - 0.5 * s * s).collect();
    let mut states = Array3::zeros((n, steps + 1, d));
    states
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dw.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut path, inc)| {
            for k in 0..d {
                let mut x = x0[k];
                path[[0, k]] = x;
                for i in 0..steps {
                    x = x + drift[k] * grid.deltas()[i] + model.sigma[k] * inc[[i, k]];
                    path[[i + 1, k]] = x;
                }
            }
        });
    states
}

impl PathModel for BlackScholesModel {
    fn rate(&self) -> f64 {
        self.r
    }

    fn simulate_paths(&self, grid: &TimeGrid, n: usize, seeds: &SeedSpec) -> Result<PathBatch> {
        simulate_bs_paths(self, grid, n, seeds)
    }

    fn terminal_states(&self, grid: &TimeGrid, paths: Range<usize>, seeds: &SeedSpec) -> Result<Array2<f64>> {
        let factor = correlation_factor(self.correlation().view())?;
        let dw = increments_with_factor(grid, paths, factor.view(), seeds);
        let states = log_euler_states(self, grid, dw.view());
        Ok(states.index_axis(Axis(1), grid.steps()).to_owned())
    }
}

impl MarkovianModel for BlackScholesModel {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn noise_dim(&self) -> usize {
        self.dim()
    }

    fn initial_state(&self) -> Array1<f64> {
        self.log_spot()
    }

    fn simulate(&self, grid: &TimeGrid, n: usize, seeds: &SeedSpec) -> Result<PathBatch> {
        simulate_bs_paths(self, grid, n, seeds)
    }

    fn diffusion_apply(&self, _t: f64, _x: ArrayView1<f64>, v: ArrayView1<f64>, out: &mut [f64]) {
        for k in 0..self.dim() {
            out[k] = self.sigma[k] * v[k];
        }
    }
}
