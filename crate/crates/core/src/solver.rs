//! Settings and diagnostics shared by the backward solvers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reservoir::{ReservoirConfig, DEFAULT_RANGE};
use crate::rls::{ridge_solve, MomentAccumulator, Ridge, RidgeSolution};

/// How the per-step normal-equation moments are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentRoute {
    /// Sorted prefix sums when the state is one-dimensional, dense otherwise.
    Auto,
    /// Explicit feature rows accumulated chunk by chunk.
    Dense,
    /// Sorted prefix sums; requires a one-dimensional state.
    Sorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub nodes: usize,
    pub range: f64,
    pub connectivity: f64,
    pub ridge: Ridge,
    /// Clamp regression targets and the price at zero.
    pub absorption: bool,
    pub route: MomentRoute,
}

impl SolverConfig {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes,
            range: DEFAULT_RANGE,
            connectivity: 1.0,
            ridge: Ridge::default(),
            absorption: false,
            route: MomentRoute::Auto,
        }
    }

    pub fn reservoir(&self, input_dim: usize) -> ReservoirConfig {
        ReservoirConfig::new(self.nodes, input_dim)
            .with_range(self.range)
            .with_connectivity(self.connectivity)
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        self.reservoir(input_dim).validate()?;
        self.ridge.validate()
    }

    pub(crate) fn sorted_route(&self, state_dim: usize) -> Result<bool> {
        match self.route {
            MomentRoute::Auto => Ok(state_dim == 1),
            MomentRoute::Dense => Ok(false),
            MomentRoute::Sorted if state_dim == 1 => Ok(true),
            MomentRoute::Sorted => Err(Error::invalid("the sorted moment route needs a one-dimensional state")),
        }
    }
}

/// Per-step record of the regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub lambda: f64,
    pub jitter: f64,
    pub gram_condition: f64,
    pub residual_norm: f64,
    pub route: MomentRoute,
}

/// Solves one step's normal equations and attaches the step index to errors.
pub(crate) fn fit_step(
    acc: &MomentAccumulator,
    ridge: Ridge,
    step: usize,
    route: MomentRoute,
) -> Result<(RidgeSolution, StepDiagnostics)> {
    let lambda = ridge.lambda_for(acc);
    let sol = ridge_solve(acc, lambda).map_err(|e| e.at_step(step))?;
    if sol.beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    let diag = StepDiagnostics {
        step,
        lambda,
        jitter: sol.jitter,
        gram_condition: sol.gram_condition,
        residual_norm: sol.residual_norm,
        route,
    };
    Ok((sol, diag))
}

pub(crate) fn absorb(values: &mut Array2<f64>) {
    values.mapv_inplace(|v| v.max(0.0));
}
