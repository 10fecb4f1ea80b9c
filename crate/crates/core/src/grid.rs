use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition `0 = t_0 < t_1 < ... < t_N = T` of the pricing horizon, in years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    deltas: Vec<f64>,
}

impl TimeGrid {
    /// Builds a grid from explicit time points. The first point must be 0 and
    /// the sequence strictly increasing.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a time grid needs at least two points"));
        }
        if times[0] != 0.0 {
            return Err(Error::invalid("time grid must start at 0"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("time grid contains non-finite points"));
        }
        let deltas: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if deltas.iter().any(|&d| d <= 0.0) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        Ok(Self { times, deltas })
    }

    pub fn uniform(maturity: f64, steps: usize) -> Result<Self> {
        make_uniform_grid(maturity, steps)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.deltas.len()
    }

    pub fn maturity(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Largest step width `|π|`.
    pub fn modulus(&self) -> f64 {
        self.deltas.iter().cloned().fold(0.0, f64::max)
    }
}

/// `N + 1` equally spaced points on `[0, T]`. The last point is exactly `T`.
pub fn make_uniform_grid(maturity: f64, steps: usize) -> Result<TimeGrid> {
    if !(maturity > 0.0) || !maturity.is_finite() {
        return Err(Error::invalid(format!("maturity must be positive, got {maturity}")));
    }
    if steps == 0 {
        return Err(Error::invalid("number of steps must be at least 1"));
    }
    let dt = maturity / steps as f64;
    let mut times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    times[steps] = maturity;
    let deltas = vec![dt; steps];
    Ok(TimeGrid { times, deltas })
}
