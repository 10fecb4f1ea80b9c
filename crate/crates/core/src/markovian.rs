//! Backward regression solver for Markovian pricing PDEs with an affine driver.
//!
//! At step `i` the continuation value is represented as `Θ^i Φ^i(x)` with a
//! fresh reservoir `Φ^i`. The readout minimizes the one-step loss whose
//! features and targets are
//!
//! ```text
//! X^i = (1 − a δ_i) Φ(X_{t_i}) + DΦ(X_{t_i}) Σ_i (b δ_i + ΔW_i)
//! Y^i = Û_{i+1} + f̃ δ_i
//! ```

use std::ops::Range;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::Serialize;

use crate::driver::{terminal_targets, AffineDriver, Payoff};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::MarkovianModel;
use crate::paths::PathBatch;
use crate::reservoir::{relu, sample_reservoir, Readout, Reservoir, ReservoirRecord};
use crate::rls::MomentAccumulator;
use crate::rng::SeedSpec;
use crate::solver::{absorb, fit_step, MomentRoute, SolverConfig, StepDiagnostics};
use crate::sorted_moments::SortedDesign;

#[derive(Debug, Clone)]
pub struct MarkovianSolve {
    /// `readouts[i]` and `reservoirs[i]` represent the value at `t_i`.
    pub readouts: Vec<Readout>,
    pub reservoirs: Vec<Reservoir>,
    pub grid: TimeGrid,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Value at the deterministic start, one entry per payoff output.
    pub price: Array1<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Serialize)]
struct StepWeights<'a> {
    step: usize,
    time: f64,
    reservoir: ReservoirRecord,
    theta: Vec<Vec<f64>>,
    diagnostics: &'a StepDiagnostics,
}

impl MarkovianSolve {
    /// Reservoirs, readouts and diagnostics of every step as JSON.
    pub fn weights_json(&self) -> serde_json::Value {
        let steps: Vec<StepWeights> = (0..self.readouts.len())
            .map(|i| StepWeights {
                step: i,
                time: self.grid.times()[i],
                reservoir: self.reservoirs[i].to_record(),
                theta: self.readouts[i].theta.outer_iter().map(|r| r.to_vec()).collect(),
                diagnostics: &self.diagnostics[i],
            })
            .collect();
        serde_json::json!({ "kind": "markovian", "steps": steps })
    }

    /// Value approximation at `t_i`.
    pub fn value(&self, step: usize, x: ndarray::ArrayView1<f64>) -> Result<Array1<f64>> {
        self.reservoirs[step].net_eval(&self.readouts[step], x)
    }
}

/// Per-path quantities of one step: `p = 1 − aδ`, `s = Σ(bδ + ΔW)` and the
/// target `Y`.
struct StepInputs {
    p: Array1<f64>,
    s: Array2<f64>,
    y: Array2<f64>,
}

fn step_inputs<M: MarkovianModel>(
    model: &M,
    driver: &AffineDriver,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
    rows: Range<usize>,
) -> StepInputs {
    let t = grid.times()[step];
    let delta = grid.deltas()[step];
    let xs = paths.states_at(step);
    let dw = paths.increments_at(step);
    let (d, dw_dim) = (paths.state_dim(), paths.noise_dim());
    let len = rows.len();
    let mut p = Array1::zeros(len);
    let mut s = Array2::zeros((len, d));
    let mut y = next.slice(s![rows.clone(), ..]).to_owned();
    let mut v = Array1::zeros(dw_dim);
    let mut buf = vec![0.0; d];
    for (r, j) in rows.enumerate() {
        let x = xs.row(j);
        p[r] = 1.0 - driver.a.eval(t, x) * delta;
        let b = driver.b.eval(t, x);
        for k in 0..dw_dim {
            v[k] = b * delta + dw[[j, k]];
        }
        model.diffusion_apply(t, x, v.view(), &mut buf);
        for k in 0..d {
            s[[r, k]] = buf[k];
        }
        let f = driver.f_tilde.eval(t, x) * delta;
        if f != 0.0 {
            y.row_mut(r).mapv_inplace(|u| u + f);
        }
    }
    StepInputs { p, s, y }
}

fn dense_rows(res: &Reservoir, xs: ArrayView2<f64>, inputs: &StepInputs) -> Array2<f64> {
    let a = res.weights();
    let mut z = xs.dot(&a.t());
    z += res.bias();
    let g = inputs.s.dot(&a.t());
    for ((mut zr, gr), &p) in z.outer_iter_mut().zip(g.outer_iter()).zip(inputs.p.iter()) {
        for (zk, gk) in zr.iter_mut().zip(gr.iter()) {
            *zk = if *zk > 0.0 { p * relu(*zk) + gk } else { 0.0 };
        }
    }
    z
}

/// Features `X^i` (`n × K`) and targets `Y^i` (`n × m`) of step `i`, given the
/// step-`(i+1)` values `next`.
pub fn build_features_markovian<M: MarkovianModel>(
    res: &Reservoir,
    driver: &AffineDriver,
    model: &M,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_inputs(res, model, paths, grid, step, next)?;
    let n = paths.n_paths();
    let inputs = step_inputs(model, driver, paths, grid, step, next, 0..n);
    let x = dense_rows(res, paths.states_at(step), &inputs);
    Ok((x, inputs.y))
}

fn check_inputs<M: MarkovianModel>(
    res: &Reservoir,
    model: &M,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
) -> Result<()> {
    if paths.n_steps() != grid.steps() {
        return Err(Error::invalid("path batch and grid have different step counts"));
    }
    if step >= grid.steps() {
        return Err(Error::invalid(format!("step {step} is outside the grid")));
    }
    if paths.noise_dim() != model.noise_dim() || paths.state_dim() != model.state_dim() {
        return Err(Error::MissingData("increments matching the model's noise dimension"));
    }
    if res.input_dim() != paths.state_dim() {
        return Err(Error::invalid("reservoir input dimension differs from the state dimension"));
    }
    if next.nrows() != paths.n_paths() {
        return Err(Error::invalid("next-step values must have one row per path"));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step_moments<M: MarkovianModel>(
    res: &Reservoir,
    driver: &AffineDriver,
    model: &M,
    paths: &PathBatch,
    grid: &TimeGrid,
    step: usize,
    next: ArrayView2<f64>,
    sorted: bool,
) -> Result<MomentAccumulator> {
    check_inputs(res, model, paths, grid, step, next)?;
    let n = paths.n_paths();
    let (k, m) = (res.nodes(), next.ncols());
    let xs = paths.states_at(step);
    if sorted {
        let inputs = step_inputs(model, driver, paths, grid, step, next, 0..n);
        let x = xs.column(0);
        let mut basis = Array2::zeros((n, 3));
        for j in 0..n {
            basis[[j, 0]] = inputs.p[j];
            basis[[j, 1]] = inputs.p[j] * x[j];
            basis[[j, 2]] = inputs.s[[j, 0]];
        }
        let design = SortedDesign::new(x, basis.view(), inputs.y.view())?;
        let a = res.weights().column(0).to_vec();
        let b = res.bias().to_vec();
        let coeffs = Array2::from_shape_fn((k, 3), |(u, c)| if c == 0 { b[u] } else { a[u] });
        design.moments(&a, &b, coeffs.view())
    } else {
        MomentAccumulator::from_chunks(n, k, m, |rows| {
            let inputs = step_inputs(model, driver, paths, grid, step, next, rows.clone());
            let x = dense_rows(res, xs.slice(s![rows, ..]), &inputs);
            Ok((x, inputs.y))
        })
    }
}

/// Runs the backward recursion on an existing path batch. `reservoir_for(i)`
/// supplies the reservoir of step `i`.
pub fn solve_markovian_on_paths<M, F>(
    model: &M,
    driver: &AffineDriver,
    payoff: &Payoff,
    grid: &TimeGrid,
    paths: &PathBatch,
    config: &SolverConfig,
    reservoir_for: F,
) -> Result<MarkovianSolve>
where
    M: MarkovianModel,
    F: Fn(usize) -> Result<Reservoir>,
{
    let start = Instant::now();
    config.ridge.validate()?;
    let sorted = config.sorted_route(model.state_dim())?;
    let route = if sorted { MomentRoute::Sorted } else { MomentRoute::Dense };
    let steps = grid.steps();
    let mut values = terminal_targets(payoff, paths)?;
    let mut readouts = Vec::with_capacity(steps);
    let mut reservoirs = Vec::with_capacity(steps);
    let mut diagnostics = Vec::with_capacity(steps);
    for i in (0..steps).rev() {
        let res = reservoir_for(i)?;
        let acc = step_moments(&res, driver, model, paths, grid, i, values.view(), sorted)?;
        let (sol, diag) = fit_step(&acc, config.ridge, i, route)?;
        let readout = Readout::new(sol.beta);
        values = res.net_eval_batch(&readout, paths.states_at(i))?;
        if config.absorption {
            absorb(&mut values);
        }
        readouts.push(readout);
        reservoirs.push(res);
        diagnostics.push(diag);
    }
    readouts.reverse();
    reservoirs.reverse();
    diagnostics.reverse();
    let x0 = model.initial_state();
    let mut price = reservoirs[0].net_eval(&readouts[0], x0.view())?;
    if config.absorption {
        price.mapv_inplace(|v| v.max(0.0));
    }
    Ok(MarkovianSolve {
        readouts,
        reservoirs,
        grid: grid.clone(),
        diagnostics,
        price,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Simulates `n` paths and solves backward with fresh reservoirs per step.
pub fn backward_solve_markovian<M: MarkovianModel>(
    model: &M,
    driver: &AffineDriver,
    payoff: &Payoff,
    grid: &TimeGrid,
    n: usize,
    config: &SolverConfig,
    seeds: &SeedSpec,
) -> Result<MarkovianSolve> {
    if n == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    config.validate(model.state_dim())?;
    let start = Instant::now();
    let paths = model.simulate(grid, n, seeds)?;
    let rc = config.reservoir(model.state_dim());
    let mut solve = solve_markovian_on_paths(model, driver, payoff, grid, &paths, config, |i| {
        sample_reservoir(&rc, seeds, i, 0)
    })?;
    solve.wall_time = start.elapsed().as_secs_f64();
    Ok(solve)
}
