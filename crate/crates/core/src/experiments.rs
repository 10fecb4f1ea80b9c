//! Reproduction harness for the pricing experiments: node-count sweeps,
//! independent calls, a correlated basket and the rough Bergomi call.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{array, Array2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::benchmarks::{bs_closed_form, mc_price_outputs, reference_price, relative_error, PriceReport};
use crate::driver::{AffineDriver, Payoff};
use crate::error::{Error, Result};
use crate::grid::{make_uniform_grid, TimeGrid};
use crate::markovian::solve_markovian_on_paths;
use crate::models::{ForwardVariance, PathModel, RoughBergomiModel};
use crate::models::BlackScholesModel;
use crate::nonmarkovian::{solve_nonmarkovian_on_paths, ROLE_THETA, ROLE_XI};
use crate::paths::PathBatch;
use crate::reservoir::sample_reservoir;
use crate::rls::Ridge;
use crate::rng::SeedSpec;
use crate::solver::{SolverConfig, StepDiagnostics};

pub const SCHEMA_VERSION: u32 = 1;

/// Shared market constants of all experiments.
pub const RATE: f64 = 0.01;
pub const MATURITY: f64 = 1.0;
pub const SPOT: f64 = 1.0;
pub const STRIKE: f64 = 1.0;

/// Correlation of the five-asset basket.
pub fn basket_correlation() -> Array2<f64> {
    array![
        [1.0, 0.84, -0.51, -0.70, 0.15],
        [0.84, 1.0, -0.66, -0.85, 0.41],
        [-0.51, -0.66, 1.0, 0.55, -0.82],
        [-0.70, -0.85, 0.55, 1.0, -0.51],
        [0.15, 0.41, -0.82, -0.51, 1.0]
    ]
}

/// `d` points evenly spaced over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, d: usize) -> Vec<f64> {
    match d {
        0 => vec![],
        1 => vec![lo],
        _ => (0..d).map(|j| lo + (hi - lo) * j as f64 / (d - 1) as f64).collect(),
    }
}

/// Volatilities of the independent-calls experiment: `0.05, 0.10, …, 0.25` for
/// five assets, otherwise evenly spaced over `[0.05, 0.4]`.
pub fn calls_volatilities(d: usize) -> Vec<f64> {
    if d == 5 {
        vec![0.05, 0.10, 0.15, 0.20, 0.25]
    } else {
        linspace(0.05, 0.4, d)
    }
}

/// Rough Bergomi configuration of the `rb-*` experiments.
pub fn standard_rbergomi() -> RoughBergomiModel {
    RoughBergomiModel::new(0.3, 1.9, -0.7, RATE, SPOT, ForwardVariance::flat(0.235 * 0.235))
        .expect("valid parameters")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BsConvergence,
    BsCalls,
    BsBasket,
    RbCall,
    RbConvergence,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::BsConvergence,
        ExperimentKind::BsCalls,
        ExperimentKind::BsBasket,
        ExperimentKind::RbCall,
        ExperimentKind::RbConvergence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::BsConvergence => "bs-convergence",
            ExperimentKind::BsCalls => "bs-calls",
            ExperimentKind::BsBasket => "bs-basket",
            ExperimentKind::RbCall => "rb-call",
            ExperimentKind::RbConvergence => "rb-convergence",
        }
    }

    pub fn is_sweep(self) -> bool {
        matches!(self, ExperimentKind::BsConvergence | ExperimentKind::RbConvergence)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub steps: usize,
    pub n_paths: usize,
    pub nodes: Vec<usize>,
    pub connectivity: f64,
    pub range: f64,
    pub ridge: Ridge,
    /// `None` runs both variants where the experiment reports both.
    pub absorption: Option<bool>,
    pub seed: u64,
    pub repeats: usize,
    /// Asset count of `bs-calls`.
    pub dims: usize,
    pub reference_steps: usize,
    pub reference_paths: usize,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let sweep = experiment.is_sweep();
        Self {
            experiment,
            steps: 21,
            n_paths: 50_000,
            nodes: if sweep { vec![10, 100, 1000] } else { vec![100] },
            connectivity: if sweep { 1.0 } else { 0.5 },
            range: 1.0,
            ridge: Ridge::default(),
            absorption: if sweep { Some(true) } else { None },
            seed: 0,
            repeats: if sweep { 20 } else { 1 },
            dims: 5,
            reference_steps: 100,
            reference_paths: match experiment {
                ExperimentKind::BsBasket => 400_000,
                ExperimentKind::RbCall | ExperimentKind::RbConvergence => 800_000,
                _ => 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.n_paths == 0 || self.repeats == 0 || self.dims == 0 {
            return Err(Error::invalid("steps, paths, repeats and dims must be positive"));
        }
        if self.nodes.is_empty() || self.nodes.contains(&0) {
            return Err(Error::invalid("node counts must be positive"));
        }
        if !self.experiment.is_sweep() && self.nodes.len() != 1 {
            return Err(Error::invalid("single-run experiments take exactly one node count"));
        }
        let needs_reference = matches!(
            self.experiment,
            ExperimentKind::BsBasket | ExperimentKind::RbCall | ExperimentKind::RbConvergence
        );
        if needs_reference && (self.reference_paths == 0 || self.reference_steps == 0) {
            return Err(Error::invalid("reference steps and paths must be positive"));
        }
        self.solver(self.nodes[0], false).validate(1)
    }

    fn solver(&self, nodes: usize, absorption: bool) -> SolverConfig {
        SolverConfig {
            nodes,
            range: self.range,
            connectivity: self.connectivity,
            ridge: self.ridge,
            absorption,
            ..SolverConfig::new(nodes)
        }
    }

    fn variants(&self) -> Vec<bool> {
        match self.absorption {
            Some(a) => vec![a],
            None => vec![true, false],
        }
    }
}

/// What to capture besides the result document.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Captures {
    pub weights: bool,
    pub paths: bool,
}

/// Result document plus optional tabular rows and captures.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub document: Value,
    pub csv_header: Vec<String>,
    pub csv_rows: Vec<Vec<String>>,
    pub weights: Option<Value>,
    pub paths_csv: Option<String>,
}

impl ExperimentOutput {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.csv_header)?;
        for row in &self.csv_rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-node-count summary of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub nodes: usize,
    pub mse: Vec<f64>,
    pub mean_mse: f64,
    pub q10: f64,
    pub q90: f64,
}

impl ConvergenceRecord {
    pub fn from_errors(nodes: usize, mse: Vec<f64>) -> Self {
        let mean_mse = mse.iter().sum::<f64>() / mse.len() as f64;
        Self {
            nodes,
            q10: quantile(&mse, 0.1),
            q90: quantile(&mse, 0.9),
            mean_mse,
            mse,
        }
    }
}

/// Linear-interpolation quantile of a sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Least-squares slope of `log MSE` against `log K`.
pub fn fit_loglog_slope(records: &[(f64, f64)]) -> Result<f64> {
    if records.iter().any(|(k, m)| !(*k > 0.0) || !(*m > 0.0)) {
        return Err(Error::invalid("node counts and errors must be positive for a log-log fit"));
    }
    let xs: Vec<f64> = records.iter().map(|(k, _)| k.ln()).collect();
    let ys: Vec<f64> = records.iter().map(|(_, m)| m.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if records.len() < 2 || sxx == 0.0 {
        return Err(Error::invalid("a slope needs at least two distinct node counts"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

fn variant_key(absorption: bool) -> &'static str {
    if absorption {
        "pde_w_abs"
    } else {
        "pde_wo_abs"
    }
}

fn diagnostics_summary(diags: &[StepDiagnostics]) -> Value {
    let max_cond = diags.iter().map(|d| d.gram_condition).fold(0.0f64, f64::max);
    let max_res = diags.iter().map(|d| d.residual_norm).fold(0.0f64, f64::max);
    let jittered = diags.iter().filter(|d| d.jitter > 0.0).count();
    json!({ "max_gram_condition": max_cond, "max_residual": max_res, "jittered_steps": jittered })
}

fn settings_json(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn paths_csv(paths: &PathBatch, grid: &TimeGrid) -> Result<String> {
    let mut buf = Vec::new();
    paths.write_csv(grid, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.10e}")
}

/// Runs one experiment end to end.
pub fn run_experiment(cfg: &ExperimentConfig, captures: Captures) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentKind::BsCalls => run_bs_calls(cfg, captures),
        ExperimentKind::BsBasket => run_basket(cfg, captures),
        ExperimentKind::RbCall => run_rb_call(cfg, captures),
        ExperimentKind::BsConvergence | ExperimentKind::RbConvergence => run_sweep(cfg, captures),
    }
}

struct MarkovianRun {
    /// Prices per variant (absorption flag) and output.
    prices: Vec<(bool, Vec<f64>)>,
    mc: Vec<PriceReport>,
    diagnostics: Vec<(bool, Value)>,
    weights: Option<Value>,
    paths_csv: Option<String>,
    times: Value,
}

fn run_markovian_once(
    cfg: &ExperimentConfig,
    model: &BlackScholesModel,
    payoff: &Payoff,
    seeds: &SeedSpec,
    captures: Captures,
) -> Result<MarkovianRun> {
    let grid = make_uniform_grid(MATURITY, cfg.steps)?;
    let t_paths = Instant::now();
    let paths = model.simulate_paths(&grid, cfg.n_paths, seeds)?;
    let path_time = t_paths.elapsed().as_secs_f64();
    let driver = AffineDriver::pricing(RATE);
    let mut prices = Vec::new();
    let mut diagnostics = Vec::new();
    let mut weights = serde_json::Map::new();
    let mut times = serde_json::Map::new();
    times.insert("paths".into(), json!(path_time));
    for absorption in cfg.variants() {
        let sc = cfg.solver(cfg.nodes[0], absorption);
        let rc = sc.reservoir(model.dim());
        let solve = solve_markovian_on_paths(model, &driver, payoff, &grid, &paths, &sc, |i| {
            sample_reservoir(&rc, seeds, i, 0)
        })?;
        times.insert(variant_key(absorption).into(), json!(solve.wall_time));
        prices.push((absorption, solve.price.to_vec()));
        diagnostics.push((absorption, diagnostics_summary(&solve.diagnostics)));
        if captures.weights {
            weights.insert(variant_key(absorption).into(), solve.weights_json());
        }
    }
    let t_mc = Instant::now();
    let mc = mc_price_outputs(&paths, payoff, RATE, MATURITY)?;
    times.insert("mc".into(), json!(t_mc.elapsed().as_secs_f64()));
    Ok(MarkovianRun {
        prices,
        mc,
        diagnostics,
        weights: captures.weights.then_some(Value::Object(weights)),
        paths_csv: if captures.paths { Some(paths_csv(&paths, &grid)?) } else { None },
        times: Value::Object(times),
    })
}

fn repeat_seeds(cfg: &ExperimentConfig, r: usize) -> SeedSpec {
    SeedSpec::new(cfg.seed).child(r as u64)
}

fn run_bs_calls(cfg: &ExperimentConfig, captures: Captures) -> Result<ExperimentOutput> {
    let sigma = calls_volatilities(cfg.dims);
    let d = sigma.len();
    let model = BlackScholesModel::independent(vec![SPOT; d], RATE, sigma.clone())?;
    let payoff = Payoff::IndependentCalls { strike: STRIKE };
    let truth: Vec<f64> = sigma
        .iter()
        .map(|&s| bs_closed_form(SPOT, STRIKE, RATE, s, MATURITY))
        .collect::<Result<_>>()?;

    let mut repeats = Vec::new();
    let mut rows = Vec::new();
    let mut wall = Vec::new();
    let mut first: Option<MarkovianRun> = None;
    for r in 0..cfg.repeats {
        let run = run_markovian_once(cfg, &model, &payoff, &repeat_seeds(cfg, r), if r == 0 { captures } else { Captures::default() })?;
        let mut prices = serde_json::Map::new();
        let mut rel = serde_json::Map::new();
        let mut mse = serde_json::Map::new();
        for (abs, p) in &run.prices {
            let key = variant_key(*abs);
            prices.insert(key.into(), json!(p));
            rel.insert(key.into(), json!(p.iter().zip(&truth).map(|(e, t)| relative_error(*t, *e)).collect::<Vec<_>>()));
            mse.insert(key.into(), json!(total_mse(p, &truth)));
        }
        let mc: Vec<f64> = run.mc.iter().map(|m| m.price).collect();
        prices.insert("mc".into(), json!(mc));
        rel.insert("mc".into(), json!(mc.iter().zip(&truth).map(|(e, t)| relative_error(*t, *e)).collect::<Vec<_>>()));
        mse.insert("mc".into(), json!(total_mse(&mc, &truth)));
        let mc_se: Vec<f64> = run.mc.iter().map(|m| m.std_error).collect();

        for k in 0..d {
            let get = |abs: bool| {
                run.prices
                    .iter()
                    .find(|(a, _)| *a == abs)
                    .map(|(_, p)| fmt_f(p[k]))
                    .unwrap_or_default()
            };
            let rel_of = |abs: bool| {
                run.prices
                    .iter()
                    .find(|(a, _)| *a == abs)
                    .map(|(_, p)| fmt_f(relative_error(truth[k], p[k])))
                    .unwrap_or_default()
            };
            rows.push(vec![
                r.to_string(),
                format!("{}", sigma[k]),
                fmt_f(truth[k]),
                get(true),
                get(false),
                fmt_f(mc[k]),
                rel_of(true),
                rel_of(false),
                fmt_f(relative_error(truth[k], mc[k])),
            ]);
        }
        repeats.push(json!({
            "repeat": r,
            "prices": prices,
            "mc_std_errors": mc_se,
            "rel_errors": rel,
            "mse": mse,
            "diagnostics": run.diagnostics.iter().map(|(a, v)| (variant_key(*a).to_string(), v.clone())).collect::<serde_json::Map<_, _>>(),
        }));
        wall.push(run.times.clone());
        if r == 0 {
            first = Some(run);
        }
    }
    let first = first.expect("at least one repeat");
    let head = &repeats[0];
    let document = json!({
        "schema": SCHEMA_VERSION,
        "experiment": cfg.experiment.as_str(),
        "settings": settings_json(cfg),
        "seed": cfg.seed,
        "sigma": sigma,
        "references": { "closed_form": truth },
        "prices": head["prices"],
        "rel_errors": head["rel_errors"],
        "mse": head["mse"],
        "repeats": repeats,
        "wall_times": wall,
    });
    Ok(ExperimentOutput {
        document,
        csv_header: [
            "repeat", "sigma", "true", "pde_w_abs", "pde_wo_abs", "mc", "rel_err_w_abs", "rel_err_wo_abs", "rel_err_mc",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        csv_rows: rows,
        weights: first.weights,
        paths_csv: first.paths_csv,
    })
}

/// Mean squared error across outputs.
pub fn total_mse(estimates: &[f64], truth: &[f64]) -> f64 {
    estimates.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum::<f64>() / truth.len() as f64
}

fn basket_model() -> Result<BlackScholesModel> {
    BlackScholesModel::new(vec![SPOT; 5], RATE, linspace(0.05, 0.25, 5), basket_correlation().view())
}

fn basket_payoff() -> Payoff {
    Payoff::BasketCall {
        weights: vec![0.2; 5],
        strike: STRIKE,
    }
}

/// Variant prices, Monte Carlo report, diagnostics and timings of one repeat.
type SingleRun = (Vec<(bool, f64)>, PriceReport, Vec<(bool, Value)>, Value);

/// Single-price experiment table: per repeat the solver variants and MC
/// against a shared reference.
fn single_price_document(
    cfg: &ExperimentConfig,
    reference: &PriceReport,
    runs: &[SingleRun],
) -> (Value, Vec<Vec<String>>) {
    let mut repeats = Vec::new();
    let mut rows = Vec::new();
    let mut wall = Vec::new();
    for (r, (prices, mc, diags, times)) in runs.iter().enumerate() {
        let mut p = serde_json::Map::new();
        let mut rel = serde_json::Map::new();
        for (abs, v) in prices {
            p.insert(variant_key(*abs).into(), json!(v));
            rel.insert(variant_key(*abs).into(), json!(relative_error(reference.price, *v)));
        }
        p.insert("mc".into(), json!(mc.price));
        rel.insert("mc".into(), json!(relative_error(reference.price, mc.price)));
        let get = |abs: bool| prices.iter().find(|(a, _)| *a == abs).map(|(_, v)| fmt_f(*v)).unwrap_or_default();
        let rel_of = |abs: bool| {
            prices
                .iter()
                .find(|(a, _)| *a == abs)
                .map(|(_, v)| fmt_f(relative_error(reference.price, *v)))
                .unwrap_or_default()
        };
        rows.push(vec![
            r.to_string(),
            fmt_f(reference.price),
            get(true),
            get(false),
            fmt_f(mc.price),
            rel_of(true),
            rel_of(false),
            fmt_f(relative_error(reference.price, mc.price)),
        ]);
        repeats.push(json!({
            "repeat": r,
            "prices": p,
            "mc_std_error": mc.std_error,
            "rel_errors": rel,
            "diagnostics": diags.iter().map(|(a, v)| (variant_key(*a).to_string(), v.clone())).collect::<serde_json::Map<_, _>>(),
        }));
        wall.push(times.clone());
    }
    let head = &repeats[0];
    let doc = json!({
        "schema": SCHEMA_VERSION,
        "experiment": cfg.experiment.as_str(),
        "settings": settings_json(cfg),
        "seed": cfg.seed,
        "references": {
            "mc_reference": reference.price,
            "mc_reference_std_error": reference.std_error,
            "steps": cfg.reference_steps,
            "paths": cfg.reference_paths,
        },
        "prices": head["prices"],
        "rel_errors": head["rel_errors"],
        "repeats": repeats,
        "wall_times": { "reference": reference.wall_time, "runs": wall },
    });
    (doc, rows)
}

fn single_price_header() -> Vec<String> {
    ["repeat", "reference", "pde_w_abs", "pde_wo_abs", "mc", "rel_err_w_abs", "rel_err_wo_abs", "rel_err_mc"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn run_basket(cfg: &ExperimentConfig, captures: Captures) -> Result<ExperimentOutput> {
    let model = basket_model()?;
    let payoff = basket_payoff();
    let root = SeedSpec::new(cfg.seed);
    let reference = reference_price(&model, &payoff, MATURITY, cfg.reference_steps, cfg.reference_paths, &root)?;
    let mut runs = Vec::new();
    let mut weights = None;
    let mut dumped = None;
    for r in 0..cfg.repeats {
        let run = run_markovian_once(cfg, &model, &payoff, &repeat_seeds(cfg, r), if r == 0 { captures } else { Captures::default() })?;
        let prices = run.prices.iter().map(|(a, p)| (*a, p[0])).collect();
        runs.push((prices, run.mc[0].clone(), run.diagnostics, run.times));
        if r == 0 {
            weights = run.weights;
            dumped = run.paths_csv;
        }
    }
    let (document, csv_rows) = single_price_document(cfg, &reference, &runs);
    Ok(ExperimentOutput {
        document,
        csv_header: single_price_header(),
        csv_rows,
        weights,
        paths_csv: dumped,
    })
}

struct RoughRun {
    prices: Vec<(bool, f64)>,
    mc: PriceReport,
    diagnostics: Vec<(bool, Value)>,
    weights: Option<Value>,
    paths_csv: Option<String>,
    times: Value,
}

fn run_rough_once(
    cfg: &ExperimentConfig,
    model: &RoughBergomiModel,
    nodes: usize,
    variants: &[bool],
    seeds: &SeedSpec,
    captures: Captures,
) -> Result<RoughRun> {
    let grid = make_uniform_grid(MATURITY, cfg.steps)?;
    let t_paths = Instant::now();
    let paths = model.simulate_paths(&grid, cfg.n_paths, seeds)?;
    let mut times = serde_json::Map::new();
    times.insert("paths".into(), json!(t_paths.elapsed().as_secs_f64()));
    let payoff = Payoff::Call { strike: STRIKE };
    let driver = AffineDriver::pricing(RATE);
    let mut prices = Vec::new();
    let mut diagnostics = Vec::new();
    let mut weights = serde_json::Map::new();
    for &absorption in variants {
        let sc = cfg.solver(nodes, absorption);
        let rc = sc.reservoir(1);
        let solve = solve_nonmarkovian_on_paths(model.rho1, &driver, &payoff, &grid, &paths, model.log_spot(), &sc, |i| {
            Ok((sample_reservoir(&rc, seeds, i, ROLE_THETA)?, sample_reservoir(&rc, seeds, i, ROLE_XI)?))
        })?;
        times.insert(variant_key(absorption).into(), json!(solve.wall_time));
        prices.push((absorption, solve.price));
        diagnostics.push((absorption, diagnostics_summary(&solve.diagnostics)));
        if captures.weights {
            weights.insert(variant_key(absorption).into(), solve.weights_json());
        }
    }
    let t_mc = Instant::now();
    let mc = mc_price_outputs(&paths, &payoff, RATE, MATURITY)?.remove(0);
    times.insert("mc".into(), json!(t_mc.elapsed().as_secs_f64()));
    Ok(RoughRun {
        prices,
        mc,
        diagnostics,
        weights: captures.weights.then_some(Value::Object(weights)),
        paths_csv: if captures.paths { Some(paths_csv(&paths, &grid)?) } else { None },
        times: Value::Object(times),
    })
}

fn run_rb_call(cfg: &ExperimentConfig, captures: Captures) -> Result<ExperimentOutput> {
    let model = standard_rbergomi();
    let root = SeedSpec::new(cfg.seed);
    let payoff = Payoff::Call { strike: STRIKE };
    let reference = reference_price(&model, &payoff, MATURITY, cfg.reference_steps, cfg.reference_paths, &root)?;
    let mut runs = Vec::new();
    let mut weights = None;
    let mut dumped = None;
    for r in 0..cfg.repeats {
        let run = run_rough_once(cfg, &model, cfg.nodes[0], &cfg.variants(), &repeat_seeds(cfg, r), if r == 0 { captures } else { Captures::default() })?;
        runs.push((run.prices, run.mc, run.diagnostics, run.times));
        if r == 0 {
            weights = run.weights;
            dumped = run.paths_csv;
        }
    }
    let (document, csv_rows) = single_price_document(cfg, &reference, &runs);
    Ok(ExperimentOutput {
        document,
        csv_header: single_price_header(),
        csv_rows,
        weights,
        paths_csv: dumped,
    })
}

fn run_sweep(cfg: &ExperimentConfig, captures: Captures) -> Result<ExperimentOutput> {
    let rough = cfg.experiment == ExperimentKind::RbConvergence;
    let absorption = cfg.absorption.unwrap_or(true);
    let root = SeedSpec::new(cfg.seed);
    let t_ref = Instant::now();
    let (reference, reference_se) = if rough {
        let r = reference_price(
            &standard_rbergomi(),
            &Payoff::Call { strike: STRIKE },
            MATURITY,
            cfg.reference_steps,
            cfg.reference_paths,
            &root,
        )?;
        (r.price, r.std_error)
    } else {
        (bs_closed_form(SPOT, STRIKE, RATE, 0.1, MATURITY)?, 0.0)
    };
    let ref_time = t_ref.elapsed().as_secs_f64();

    let bs = BlackScholesModel::independent(vec![SPOT], RATE, vec![0.1])?;
    let rb = standard_rbergomi();
    let payoff = Payoff::Call { strike: STRIKE };
    let driver = AffineDriver::pricing(RATE);
    let grid = make_uniform_grid(MATURITY, cfg.steps)?;

    // prices[k][r]
    let mut prices = vec![vec![0.0; cfg.repeats]; cfg.nodes.len()];
    let mut wall = vec![vec![0.0; cfg.repeats]; cfg.nodes.len()];
    let mut weights = serde_json::Map::new();
    let mut dumped = None;
    for r in 0..cfg.repeats {
        let seeds = repeat_seeds(cfg, r);
        let paths = if rough {
            rb.simulate_paths(&grid, cfg.n_paths, &seeds)?
        } else {
            bs.simulate_paths(&grid, cfg.n_paths, &seeds)?
        };
        if r == 0 && captures.paths {
            dumped = Some(paths_csv(&paths, &grid)?);
        }
        for (ki, &k) in cfg.nodes.iter().enumerate() {
            let sc = cfg.solver(k, absorption);
            let rc = sc.reservoir(1);
            let (price, time, w) = if rough {
                let s = solve_nonmarkovian_on_paths(rb.rho1, &driver, &payoff, &grid, &paths, rb.log_spot(), &sc, |i| {
                    Ok((sample_reservoir(&rc, &seeds, i, ROLE_THETA)?, sample_reservoir(&rc, &seeds, i, ROLE_XI)?))
                })?;
                let w = (r == 0 && captures.weights).then(|| s.weights_json());
                (s.price, s.wall_time, w)
            } else {
                let s = solve_markovian_on_paths(&bs, &driver, &payoff, &grid, &paths, &sc, |i| {
                    sample_reservoir(&rc, &seeds, i, 0)
                })?;
                let w = (r == 0 && captures.weights).then(|| s.weights_json());
                (s.price[0], s.wall_time, w)
            };
            prices[ki][r] = price;
            wall[ki][r] = time;
            if let Some(w) = w {
                weights.insert(k.to_string(), w);
            }
        }
    }

    let records: Vec<ConvergenceRecord> = cfg
        .nodes
        .iter()
        .zip(&prices)
        .map(|(&k, ps)| ConvergenceRecord::from_errors(k, ps.iter().map(|p| (p - reference) * (p - reference)).collect()))
        .collect();
    let slope = if records.len() >= 2 {
        fit_loglog_slope(&records.iter().map(|r| (r.nodes as f64, r.mean_mse)).collect::<Vec<_>>()).ok()
    } else {
        None
    };
    let mut rows = Vec::new();
    for (ki, rec) in records.iter().enumerate() {
        for (r, (&price, &mse)) in prices[ki].iter().zip(&rec.mse).enumerate() {
            rows.push(vec![
                rec.nodes.to_string(),
                r.to_string(),
                fmt_f(price),
                fmt_f(mse),
                fmt_f(relative_error(reference, price)),
            ]);
        }
    }
    let rel_errors: Vec<Vec<f64>> = prices.iter().map(|ps| ps.iter().map(|p| relative_error(reference, *p)).collect()).collect();
    let document = json!({
        "schema": SCHEMA_VERSION,
        "experiment": cfg.experiment.as_str(),
        "settings": settings_json(cfg),
        "seed": cfg.seed,
        "absorption": absorption,
        "references": { "price": reference, "std_error": reference_se },
        "prices": cfg.nodes.iter().zip(&prices).map(|(k, p)| (k.to_string(), json!(p))).collect::<serde_json::Map<_, _>>(),
        "rel_errors": cfg.nodes.iter().zip(&rel_errors).map(|(k, p)| (k.to_string(), json!(p))).collect::<serde_json::Map<_, _>>(),
        "mse": records,
        "slope": slope,
        "wall_times": { "reference": ref_time, "solves": wall },
    });
    Ok(ExperimentOutput {
        document,
        csv_header: ["nodes", "repeat", "price", "squared_error", "rel_error"].iter().map(|s| s.to_string()).collect(),
        csv_rows: rows,
        weights: captures.weights.then_some(Value::Object(weights)),
        paths_csv: dumped,
    })
}

/// One row of the dimension-scaling table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub dims: usize,
    pub total_mse_w_abs: Option<f64>,
    pub total_mse_wo_abs: Option<f64>,
    pub wall_time: f64,
}

/// Runs `bs-calls` for each asset count in `dims`, starting from `base`.
pub fn scaling_table(dims: &[usize], base: &ExperimentConfig) -> Result<Vec<ScalingRow>> {
    dims.iter()
        .map(|&d| {
            let cfg = ExperimentConfig {
                experiment: ExperimentKind::BsCalls,
                dims: d,
                repeats: 1,
                ..base.clone()
            };
            let start = Instant::now();
            let out = run_experiment(&cfg, Captures::default())?;
            let mse = &out.document["mse"];
            Ok(ScalingRow {
                dims: d,
                total_mse_w_abs: mse["pde_w_abs"].as_f64(),
                total_mse_wo_abs: mse["pde_wo_abs"].as_f64(),
                wall_time: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn write_scaling_csv<W: std::io::Write>(rows: &[ScalingRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["d", "total_mse_w_abs", "total_mse_wo_abs", "wall_time"])?;
    let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
    for r in rows {
        w.write_record([r.dims.to_string(), opt(r.total_mse_w_abs), opt(r.total_mse_wo_abs), format!("{:.3}", r.wall_time)])?;
    }
    w.flush()?;
    Ok(())
}

/// Drops every `wall_times` entry so documents can be compared for equality.
pub fn strip_wall_times(doc: &Value) -> Value {
    match doc {
        Value::Object(map) => Value::Object(
            map.iter()
                .filter(|(k, _)| k.as_str() != "wall_times")
                .map(|(k, v)| (k.clone(), strip_wall_times(v)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(strip_wall_times).collect()),
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_synthetic_rates() {
        let ks = [10.0, 100.0, 1000.0];
        let pts = |f: &dyn Fn(f64) -> f64| ks.iter().map(|&k| (k, f(k))).collect::<Vec<_>>();
        assert!((fit_loglog_slope(&pts(&|k| 1.0 / k)).unwrap() + 1.0).abs() < 1e-12);
        assert!(fit_loglog_slope(&pts(&|_| 0.3)).unwrap().abs() < 1e-12);
        assert!((fit_loglog_slope(&pts(&|k| k.powf(-0.5))).unwrap() + 0.5).abs() < 1e-12);
        assert!(fit_loglog_slope(&[(10.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(10.0, 1.0), (10.0, 2.0)]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let v: Vec<f64> = (1..=11).map(|i| i as f64).collect();
        assert_eq!(quantile(&v, 0.1), 2.0);
        assert_eq!(quantile(&v, 0.9), 10.0);
        assert_eq!(quantile(&[3.0, 1.0], 0.5), 2.0);
    }

    #[test]
    fn defaults_mirror_the_experiments() {
        let c = ExperimentConfig::defaults(ExperimentKind::BsCalls);
        assert_eq!((c.steps, c.n_paths, c.nodes.clone(), c.connectivity), (21, 50_000, vec![100], 0.5));
        let s = ExperimentConfig::defaults(ExperimentKind::RbConvergence);
        assert_eq!((s.nodes.clone(), s.connectivity, s.repeats, s.reference_paths), (vec![10, 100, 1000], 1.0, 20, 800_000));
        assert_eq!("bs-basket".parse::<ExperimentKind>().unwrap(), ExperimentKind::BsBasket);
        assert!("bs-put".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn volatility_sets() {
        assert_eq!(calls_volatilities(5), vec![0.05, 0.10, 0.15, 0.20, 0.25]);
        let v = calls_volatilities(10);
        assert_eq!(v.len(), 10);
        assert!((v[0] - 0.05).abs() < 1e-15 && (v[9] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ExperimentConfig::defaults(ExperimentKind::BsCalls);
        c.nodes = vec![10, 20];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(ExperimentKind::RbCall);
        c.reference_paths = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(ExperimentKind::BsCalls);
        c.connectivity = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn wall_times_are_stripped_recursively() {
        let doc = json!({"a": 1, "wall_times": [1.0], "b": {"wall_times": 2, "c": [ {"wall_times": 3, "d": 4} ]}});
        assert_eq!(strip_wall_times(&doc), json!({"a": 1, "b": {"c": [ {"d": 4} ]}}));
    }

    #[test]
    fn small_calls_run_is_reproducible() {
        let mut c = ExperimentConfig::defaults(ExperimentKind::BsCalls);
        c.n_paths = 2000;
        c.steps = 4;
        c.nodes = vec![20];
        c.dims = 2;
        let a = run_experiment(&c, Captures::default()).unwrap();
        let b = run_experiment(&c, Captures::default()).unwrap();
        assert_eq!(strip_wall_times(&a.document), strip_wall_times(&b.document));
        assert_eq!(a.document["schema"], json!(1));
        assert_eq!(a.csv_rows.len(), 2);
    }

    #[test]
    fn scaling_first_row_equals_calls_experiment() {
        let mut base = ExperimentConfig::defaults(ExperimentKind::BsCalls);
        base.n_paths = 3000;
        base.steps = 5;
        base.nodes = vec![30];
        let rows = scaling_table(&[5], &base).unwrap();
        let calls = run_experiment(&base, Captures::default()).unwrap();
        assert_eq!(rows[0].total_mse_wo_abs, calls.document["mse"]["pde_wo_abs"].as_f64());
        assert_eq!(rows[0].total_mse_w_abs, calls.document["mse"]["pde_w_abs"].as_f64());
    }

    #[test]
    fn scaling_wall_time_grows_with_dimension() {
        let mut base = ExperimentConfig::defaults(ExperimentKind::BsCalls);
        base.n_paths = 10_000;
        base.absorption = Some(false);
        let rows = scaling_table(&[5, 50, 200], &base).unwrap();
        let times: Vec<f64> = rows.iter().map(|r| r.wall_time).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]), "{times:?}");
    }

    #[test]
    fn every_rel_error_follows_the_sign_convention() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::BsCalls);
        cfg.n_paths = 3000;
        cfg.steps = 5;
        cfg.nodes = vec![30];
        let doc = run_experiment(&cfg, Captures::default()).unwrap().document;
        let truth = doc["references"]["closed_form"].as_array().unwrap();
        for key in ["pde_w_abs", "pde_wo_abs", "mc"] {
            let prices = doc["prices"][key].as_array().unwrap();
            let rel = doc["rel_errors"][key].as_array().unwrap();
            for ((t, p), e) in truth.iter().zip(prices).zip(rel) {
                let (t, p) = (t.as_f64().unwrap(), p.as_f64().unwrap());
                assert_eq!(e.as_f64().unwrap(), (t - p) / t);
            }
        }
        let sigma = doc["sigma"].as_array().unwrap();
        for (s, t) in sigma.iter().zip(truth) {
            assert_eq!(t.as_f64().unwrap(), bs_closed_form(1.0, 1.0, 0.01, s.as_f64().unwrap(), 1.0).unwrap());
        }
    }

    #[test]
    fn repeats_use_disjoint_seed_namespaces() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::BsConvergence);
        cfg.n_paths = 2000;
        cfg.steps = 4;
        cfg.nodes = vec![5, 20];
        cfg.repeats = 3;
        let doc = run_experiment(&cfg, Captures::default()).unwrap().document;
        let prices: Vec<f64> = doc["prices"]["20"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(prices.len(), 3);
        assert!(prices[0] != prices[1] && prices[1] != prices[2]);

        // the first repeat does not depend on how many follow it
        let mut one = cfg.clone();
        one.repeats = 1;
        let single = run_experiment(&one, Captures::default()).unwrap().document;
        assert_eq!(single["prices"]["20"][0], doc["prices"]["20"][0]);
    }

    #[test]
    fn changing_the_seed_changes_the_result() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::RbCall);
        cfg.n_paths = 2000;
        cfg.steps = 4;
        cfg.nodes = vec![10];
        cfg.reference_paths = 2000;
        cfg.reference_steps = 4;
        let a = run_experiment(&cfg, Captures::default()).unwrap().document;
        cfg.seed = 1;
        let b = run_experiment(&cfg, Captures::default()).unwrap().document;
        assert_ne!(strip_wall_times(&a)["prices"], strip_wall_times(&b)["prices"]);
    }
}
