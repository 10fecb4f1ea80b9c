//! Reference prices: the Black–Scholes call formula and discounted-payoff
//! Monte Carlo.

use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::driver::{terminal_targets, Payoff};
use crate::error::{Error, Result};
use crate::grid::make_uniform_grid;
use crate::models::PathModel;
use crate::paths::PathBatch;
use crate::rng::SeedSpec;

/// Paths simulated per batch by [`reference_price`].
pub const REFERENCE_BATCH: usize = 20_000;

const REDUCE_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    pub price: f64,
    /// Standard error of `price`; zero for closed-form values.
    pub std_error: f64,
    pub wall_time: f64,
    pub meta: serde_json::Value,
}

/// Standard normal CDF through `erfc`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// European call on a lognormal asset. Zero volatility or maturity gives the
/// discounted intrinsic value `(S₀ − K e^{−rT})⁺`.
pub fn bs_closed_form(spot: f64, strike: f64, rate: f64, sigma: f64, maturity: f64) -> Result<f64> {
    if !(spot > 0.0) || !(strike > 0.0) {
        return Err(Error::invalid("spot and strike must be positive"));
    }
    if !(sigma >= 0.0) || !(maturity >= 0.0) {
        return Err(Error::invalid("volatility and maturity must be non-negative"));
    }
    let disc_strike = strike * (-rate * maturity).exp();
    let sd = sigma * maturity.sqrt();
    if sd == 0.0 {
        return Ok((spot - disc_strike).max(0.0));
    }
    let d1 = ((spot / strike).ln() + (rate + 0.5 * sigma * sigma) * maturity) / sd;
    let d2 = d1 - sd;
    Ok(spot * normal_cdf(d1) - disc_strike * normal_cdf(d2))
}

/// Mean and sample standard deviation, reduced in fixed chunks so the result
/// does not depend on scheduling.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let sum: f64 = values.chunks(REDUCE_CHUNK).map(|c| c.iter().sum::<f64>()).sum();
    let mean = sum / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values
        .chunks(REDUCE_CHUNK)
        .map(|c| c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
        .sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn report_from(values: &[f64], discount: f64, start: Instant, meta: serde_json::Value) -> PriceReport {
    let (mean, sd) = mean_and_std(values);
    PriceReport {
        price: discount * mean,
        std_error: discount * sd / (values.len() as f64).sqrt(),
        wall_time: start.elapsed().as_secs_f64(),
        meta,
    }
}

/// `e^{−rT}` times the sample mean of the payoff over the batch, one report
/// per payoff output.
pub fn mc_price_outputs(paths: &PathBatch, payoff: &Payoff, rate: f64, maturity: f64) -> Result<Vec<PriceReport>> {
    let start = Instant::now();
    if paths.n_paths() == 0 {
        return Err(Error::invalid("cannot price on an empty path batch"));
    }
    let g = terminal_targets(payoff, paths)?;
    let discount = (-rate * maturity).exp();
    Ok(g.axis_iter(Axis(1))
        .map(|col| {
            let v = col.to_vec();
            report_from(&v, discount, start, serde_json::json!({ "n_paths": paths.n_paths() }))
        })
        .collect())
}

/// Single-output form of [`mc_price_outputs`].
pub fn mc_price(paths: &PathBatch, payoff: &Payoff, rate: f64, maturity: f64) -> Result<PriceReport> {
    let mut r = mc_price_outputs(paths, payoff, rate, maturity)?;
    if r.len() != 1 {
        return Err(Error::invalid("mc_price expects a single-output payoff"));
    }
    Ok(r.remove(0))
}

/// High-resolution Monte Carlo reference on a uniform `steps` grid, streamed
/// in batches so memory stays bounded. Uses the `"reference"` namespace of
/// `seeds`, independent of any solver run with the same seeds.
pub fn reference_price<M: PathModel>(
    model: &M,
    payoff: &Payoff,
    maturity: f64,
    steps: usize,
    n_ref: usize,
    seeds: &SeedSpec,
) -> Result<PriceReport> {
    let start = Instant::now();
    if n_ref == 0 {
        return Err(Error::invalid("reference needs at least one path"));
    }
    if payoff.outputs(1) != 1 {
        return Err(Error::invalid("reference prices a single-output payoff"));
    }
    let grid = make_uniform_grid(maturity, steps)?;
    let ns = seeds.named("reference");
    let mut values = Vec::with_capacity(n_ref);
    let mut lo = 0;
    while lo < n_ref {
        let hi = (lo + REFERENCE_BATCH).min(n_ref);
        let xt = model.terminal_states(&grid, lo..hi, &ns)?;
        payoff.validate(xt.ncols())?;
        values.extend(xt.outer_iter().map(|x| payoff.eval(x)[0]));
        lo = hi;
    }
    let discount = (-model.rate() * maturity).exp();
    Ok(report_from(
        &values,
        discount,
        start,
        serde_json::json!({ "steps": steps, "n_paths": n_ref }),
    ))
}

/// `(reference − estimate) / reference`.
pub fn relative_error(reference: f64, estimate: f64) -> f64 {
    (reference - estimate) / reference
}
