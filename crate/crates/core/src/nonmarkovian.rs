//! Backward regression solver for the rough-volatility pricing BSPDE.
//!
//! Each step carries two reservoirs: `Φ^Θ` for the value `u` and `Φ^Ξ` for the
//! random field `ψ`. With `ΔB = ρ₁ΔW¹ + ρ₂ΔW²` the joint features are
//!
//! ```text
//! X¹ = Φ^Ξ(X_{t_i}) (ΔW¹ − b δ)
//! X² = (1 − a δ) Φ^Θ(X_{t_i}) + DΦ^Θ(X_{t_i}) √V_{t_i} (ΔB − (b ρ₁ + c ρ₂) δ)
//! ```
//!
//! and `β = [Ξ, Θ]` solves one ridge problem over the stacked `2K` features.
//! Only the `Θ` network feeds the next step's targets.

use std::ops::Range;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::driver::{terminal_targets, AffineDriver, Payoff};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{build_volterra_plan, simulate_rbergomi_paths, RoughBergomiModel};
use crate::paths::PathBatch;
use crate::reservoir::{relu, sample_reservoir, Readout, Reservoir, ReservoirRecord};
use crate::rls::MomentAccumulator;
use crate::rng::SeedSpec;
use crate::solver::{absorb, fit_step, MomentRoute, SolverConfig, StepDiagnostics};
use crate::sorted_moments::SortedDesign;

/// Reservoir stream roles within one step.
pub const ROLE_THETA: u32 = 0;
pub const ROLE_XI: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StepReadouts {
    /// `1 × K` readout of the value network.
    pub theta: Readout,
    /// `1 × K` readout of the `ψ` network.
    pub xi: Readout,
}

#[derive(Debug, Clone)]
pub struct NonMarkovianSolve {
    pub readouts: Vec<StepReadouts>,
    pub theta_reservoirs: Vec<Reservoir>,
    pub xi_reservoirs: Vec<Reservoir>,
    pub grid: TimeGrid,
    pub rho1: f64,
    pub diagnostics: Vec<StepDiagnostics>,
    pub price: f64,
    pub wall_time: f64,
}

#[derive(Debug, Serialize)]
struct StepWeights<'a> {
    step: usize,
    time: f64,
    theta_reservoir: ReservoirRecord,
    xi_reservoir: ReservoirRecord,
    theta: Vec<f64>,
    xi: Vec<f64>,
    diagnostics: &'a StepDiagnostics,
}

impl NonMarkovianSolve {
    pub fn weights_json(&self) -> serde_json::Value {
        let steps: Vec<StepWeights> = (0..self.readouts.len())
            .map(|i| StepWeights {
                step: i,
                time: self.grid.times()[i],
                theta_reservoir: self.theta_reservoirs[i].to_record(),
                xi_reservoir: self.xi_reservoirs[i].to_record(),
                theta: self.readouts[i].theta.theta.row(0).to_vec(),
                xi: self.readouts[i].xi.theta.row(0).to_vec(),
                diagnostics: &self.diagnostics[i],
            })
            .collect();
        serde_json::json!({ "kind": "non-markovian", "steps": steps })
    }

    /// `u(t_i, x)` from the value network of step `i`.
    pub fn value(&self, step: usize, x: f64) -> Result<f64> {
        let x = Array1::from_elem(1, x);
        Ok(self.theta_reservoirs[step].net_eval(&self.readouts[step].theta, x.view())?[0])
    }
}

/// `(z¹, z²)` at step `i`: `z¹ = Ξ Φ^Ξ(x) + ρ₁√v Θ DΦ^Θ(x)`, `z² = ρ₂√v Θ DΦ^Θ(x)`.
pub fn z_fields(solve: &NonMarkovianSolve, step: usize, x: f64, v: f64) -> Result<(f64, f64)> {
    if step >= solve.readouts.len() {
        return Err(Error::invalid(format!("step {step} has no readouts")));
    }
    if !(v >= 0.0) {
        return Err(Error::invalid("variance must be non-negative"));
    }
    let xv = Array1::from_elem(1, x);
    let r = &solve.readouts[step];
    let psi = solve.xi_reservoirs[step].net_eval(&r.xi, xv.view())?[0];
    let grad = solve.theta_reservoirs[step].net_grad(&r.theta, xv.view())?[[0, 0]];
    let rho2 = (1.0 - solve.rho1 * solve.rho1).max(0.0).sqrt();
    let sv = v.sqrt();
    Ok((psi + solve.rho1 * sv * grad, rho2 * sv * grad))
}

/// Per-path scalars of one step: `q = ΔW¹ − bδ`, `p = 1 − aδ`,
/// `q2 = √V (ΔB − (bρ₁ + cρ₂)δ)` and the target `Y`.
struct StepInputs {
    q: Array1<f64>,
    p: Array1<f64>,
    q2: Array1<f64>,
    y: Array2<f64>,
}

fn step_inputs(
    driver: &AffineDriver,
    rho1: f64,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
    rows: Range<usize>,
) -> Result<StepInputs> {
    let variance = paths.variance.as_ref().ok_or(Error::MissingData("a variance path"))?;
    let rho2 = (1.0 - rho1 * rho1).max(0.0).sqrt();
    let t = grid.times()[step];
    let delta = grid.deltas()[step];
    let xs = paths.states_at(step);
    let dw = paths.increments_at(step);
    let len = rows.len();
    let mut q = Array1::zeros(len);
    let mut p = Array1::zeros(len);
    let mut q2 = Array1::zeros(len);
    let mut y = next.slice(s![rows.clone(), ..]).to_owned();
    for (r, j) in rows.enumerate() {
        let x = xs.row(j);
        let (a, b, c) = (driver.a.eval(t, x), driver.b.eval(t, x), driver.c.eval(t, x));
        let (dw1, dw2) = (dw[[j, 0]], dw[[j, 1]]);
        q[r] = dw1 - b * delta;
        p[r] = 1.0 - a * delta;
        let db = rho1 * dw1 + rho2 * dw2;
        q2[r] = variance[[j, step]].sqrt() * (db - (b * rho1 + c * rho2) * delta);
        let f = driver.f_tilde.eval(t, x) * delta;
        if f != 0.0 {
            y[[r, 0]] += f;
        }
    }
    Ok(StepInputs { q, p, q2, y })
}

fn dense_rows(res_theta: &Reservoir, res_xi: &Reservoir, xs: ArrayView2<f64>, inputs: &StepInputs) -> Array2<f64> {
    let n = xs.nrows();
    let mut x1 = xs.dot(&res_xi.weights().t());
    x1 += res_xi.bias();
    for (mut row, &q) in x1.outer_iter_mut().zip(inputs.q.iter()) {
        row.mapv_inplace(|z| relu(z) * q);
    }
    let a = res_theta.weights().column(0).to_owned();
    let mut x2 = xs.dot(&res_theta.weights().t());
    x2 += res_theta.bias();
    for j in 0..n {
        let (p, q2) = (inputs.p[j], inputs.q2[j]);
        for (z, ak) in x2.row_mut(j).iter_mut().zip(a.iter()) {
            *z = if *z > 0.0 { p * *z + ak * q2 } else { 0.0 };
        }
    }
    concatenate(Axis(1), &[x1.view(), x2.view()]).expect("matching row counts")
}

fn check_inputs(
    res_theta: &Reservoir,
    res_xi: &Reservoir,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
) -> Result<()> {
    if paths.variance.is_none() {
        return Err(Error::MissingData("a variance path"));
    }
    if paths.noise_dim() != 2 {
        return Err(Error::MissingData("both Brownian increments (dW¹, dW²)"));
    }
    if paths.state_dim() != 1 || res_theta.input_dim() != 1 || res_xi.input_dim() != 1 {
        return Err(Error::invalid("the non-Markovian scheme works on a scalar log-price"));
    }
    if paths.n_steps() != grid.steps() || step >= grid.steps() {
        return Err(Error::invalid("step outside the grid or batch/grid mismatch"));
    }
    if next.nrows() != paths.n_paths() || next.ncols() != 1 {
        return Err(Error::invalid("next-step values must be a single column with one row per path"));
    }
    Ok(())
}

/// Stacked features `[X¹, X²]` (`n × 2K`) and targets (`n × 1`) of step `i`.
#[allow(clippy::too_many_arguments)]
pub fn build_features_nonmarkovian(
    res_theta: &Reservoir,
    res_xi: &Reservoir,
    driver: &AffineDriver,
    rho1: f64,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_inputs(res_theta, res_xi, paths, grid, step, next)?;
    let inputs = step_inputs(driver, rho1, paths, grid, step, next, 0..paths.n_paths())?;
    Ok((dense_rows(res_theta, res_xi, paths.states_at(step), &inputs), inputs.y))
}

#[allow(clippy::too_many_arguments)]
fn step_moments(
    res_theta: &Reservoir,
    res_xi: &Reservoir,
    driver: &AffineDriver,
    rho1: f64,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
    sorted: bool,
) -> Result<MomentAccumulator> {
    check_inputs(res_theta, res_xi, paths, grid, step, next)?;
    let n = paths.n_paths();
    let xs = paths.states_at(step);
    let (kt, kx) = (res_theta.nodes(), res_xi.nodes());
    if sorted {
        let inputs = step_inputs(driver, rho1, paths, grid, step, next, 0..n)?;
        let x = xs.column(0);
        let mut basis = Array2::zeros((n, 5));
        for j in 0..n {
            basis[[j, 0]] = inputs.q[j];
            basis[[j, 1]] = x[j] * inputs.q[j];
            basis[[j, 2]] = inputs.p[j];
            basis[[j, 3]] = x[j] * inputs.p[j];
            basis[[j, 4]] = inputs.q2[j];
        }
        let design = SortedDesign::new(x, basis.view(), inputs.y.view())?;
        let mut weights = res_xi.weights().column(0).to_vec();
        weights.extend(res_theta.weights().column(0).iter());
        let mut biases = res_xi.bias().to_vec();
        biases.extend(res_theta.bias().iter());
        let mut coeffs = Array2::zeros((kx + kt, 5));
        for u in 0..kx {
            coeffs[[u, 0]] = biases[u];
            coeffs[[u, 1]] = weights[u];
        }
        for u in kx..kx + kt {
            coeffs[[u, 2]] = biases[u];
            coeffs[[u, 3]] = weights[u];
            coeffs[[u, 4]] = weights[u];
        }
        design.moments(&weights, &biases, coeffs.view())
    } else {
        MomentAccumulator::from_chunks(n, kx + kt, 1, |rows| {
            let inputs = step_inputs(driver, rho1, paths, grid, step, next, rows.clone())?;
            Ok((dense_rows(res_theta, res_xi, xs.slice(s![rows, ..]), &inputs), inputs.y))
        })
    }
}

/// Runs the backward recursion on an existing batch. `reservoirs_for(i)`
/// returns `(Φ^Θ, Φ^Ξ)` of step `i`; `x0` is the deterministic initial
/// log-price.
#[allow(clippy::too_many_arguments)]
pub fn solve_nonmarkovian_on_paths<F>(
    rho1: f64,
    driver: &AffineDriver,
    payoff: &Payoff,
    grid: &TimeGrid,
    paths: &PathBatch,
    x0: f64,
    config: &SolverConfig,
    reservoirs_for: F,
) -> Result<NonMarkovianSolve>
where
    F: Fn(usize) -> Result<(Reservoir, Reservoir)>,
{
    let start = Instant::now();
    if !(rho1.abs() <= 1.0) {
        return Err(Error::invalid("correlation must lie in [-1, 1]"));
    }
    config.ridge.validate()?;
    let sorted = config.sorted_route(paths.state_dim())?;
    let route = if sorted { MomentRoute::Sorted } else { MomentRoute::Dense };
    if payoff.outputs(1) != 1 {
        return Err(Error::invalid("the non-Markovian scheme prices a single payoff"));
    }
    let steps = grid.steps();
    let mut values = terminal_targets(payoff, paths)?;
    let mut readouts = Vec::with_capacity(steps);
    let mut thetas = Vec::with_capacity(steps);
    let mut xis = Vec::with_capacity(steps);
    let mut diagnostics = Vec::with_capacity(steps);
    for i in (0..steps).rev() {
        let (res_theta, res_xi) = reservoirs_for(i)?;
        let acc = step_moments(&res_theta, &res_xi, driver, rho1, paths, grid, i, values.view(), sorted)?;
        let (sol, diag) = fit_step(&acc, config.ridge, i, route)?;
        let kx = res_xi.nodes();
        let xi = Readout::new(sol.beta.slice(s![.., ..kx]).to_owned());
        let theta = Readout::new(sol.beta.slice(s![.., kx..]).to_owned());
        values = res_theta.net_eval_batch(&theta, paths.states_at(i))?;
        if config.absorption {
            absorb(&mut values);
        }
        readouts.push(StepReadouts { theta, xi });
        thetas.push(res_theta);
        xis.push(res_xi);
        diagnostics.push(diag);
    }
    readouts.reverse();
    thetas.reverse();
    xis.reverse();
    diagnostics.reverse();
    let x = Array1::from_elem(1, x0);
    let mut price = thetas[0].net_eval(&readouts[0].theta, x.view())?[0];
    if config.absorption {
        price = price.max(0.0);
    }
    Ok(NonMarkovianSolve {
        readouts,
        theta_reservoirs: thetas,
        xi_reservoirs: xis,
        grid: grid.clone(),
        rho1,
        diagnostics,
        price,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Simulates rough Bergomi paths on `grid` and solves backward with two fresh
/// reservoirs per step.
pub fn backward_solve_nonmarkovian(
    model: &RoughBergomiModel,
    driver: &AffineDriver,
    payoff: &Payoff,
    grid: &TimeGrid,
    n: usize,
    config: &SolverConfig,
    seeds: &SeedSpec,
) -> Result<NonMarkovianSolve> {
    if n == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    config.validate(1)?;
    let start = Instant::now();
    let plan = build_volterra_plan(model.hurst, grid)?;
    let paths = simulate_rbergomi_paths(model, &plan, grid, n, seeds)?;
    let rc = config.reservoir(1);
    let mut solve =
        solve_nonmarkovian_on_paths(model.rho1, driver, payoff, grid, &paths, model.log_spot(), config, |i| {
            Ok((sample_reservoir(&rc, seeds, i, ROLE_THETA)?, sample_reservoir(&rc, seeds, i, ROLE_XI)?))
        })?;
    solve.wall_time = start.elapsed().as_secs_f64();
    Ok(solve)
}

/// Net gradient of the value network, `Θ DΦ^Θ(x)`.
pub fn value_gradient(solve: &NonMarkovianSolve, step: usize, x: ArrayView1<f64>) -> Result<f64> {
    Ok(solve.theta_reservoirs[step].net_grad(&solve.readouts[step].theta, x)?[[0, 0]])
}
