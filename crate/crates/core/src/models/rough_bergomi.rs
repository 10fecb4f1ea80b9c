use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::ops::Range;

use super::volterra::{build_volterra_plan, VolterraKernelPlan};
use super::PathModel;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::PathBatch;
use crate::rng::SeedSpec;

/// Initial forward variance curve `t ↦ ξ₀(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ForwardVariance {
    Flat { level: f64 },
    /// Piecewise linear through `(t, ξ)` knots, flat beyond the ends.
    Linear { knots: Vec<(f64, f64)> },
}

impl ForwardVariance {
    pub fn flat(level: f64) -> Self {
        ForwardVariance::Flat { level }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            ForwardVariance::Flat { level } => *level,
            ForwardVariance::Linear { knots } => {
                let i = knots.partition_point(|(s, _)| *s <= t);
                if i == 0 {
                    knots[0].1
                } else if i == knots.len() {
                    knots[i - 1].1
                } else {
                    let (t0, v0) = knots[i - 1];
                    let (t1, v1) = knots[i];
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ForwardVariance::Flat { level } => {
                if !(*level > 0.0) || !level.is_finite() {
                    return Err(Error::invalid("forward variance must be positive"));
                }
            }
            ForwardVariance::Linear { knots } => {
                if knots.is_empty() {
                    return Err(Error::invalid("forward variance curve needs at least one knot"));
                }
                if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(Error::invalid("forward variance knots must be strictly increasing in time"));
                }
                if knots.iter().any(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::invalid("forward variance must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Rough Bergomi dynamics for the log-price `X = log S`:
/// `dX = (r − V/2)dt + √V (ρ₁ dW¹ + ρ₂ dW²)`, `V_t = ξ₀(t)·exp(ηŴ_t − ½η² t^{2H})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughBergomiModel {
    pub hurst: f64,
    pub eta: f64,
    pub rho1: f64,
    pub rate: f64,
    pub spot: f64,
    pub xi0: ForwardVariance,
}

impl RoughBergomiModel {
    pub fn new(hurst: f64, eta: f64, rho1: f64, rate: f64, spot: f64, xi0: ForwardVariance) -> Result<Self> {
        let m = Self {
            hurst,
            eta,
            rho1,
            rate,
            spot,
            xi0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            return Err(Error::invalid(format!("Hurst parameter must lie in (0, 1), got {}", self.hurst)));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid("vol-of-vol must be non-negative"));
        }
        if !(self.rho1.abs() <= 1.0) {
            return Err(Error::invalid("correlation must lie in [-1, 1]"));
        }
        if !(self.spot > 0.0) || !self.rate.is_finite() {
            return Err(Error::invalid("spot must be positive and rate finite"));
        }
        self.xi0.validate()
    }

    /// `√(1 − ρ₁²)`.
    pub fn rho2(&self) -> f64 {
        (1.0 - self.rho1 * self.rho1).max(0.0).sqrt()
    }

    pub fn log_spot(&self) -> f64 {
        self.spot.ln()
    }
}

/// One simulated path on an `N`-step grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughBergomiPath {
    pub log_price: Vec<f64>,
    pub variance: Vec<f64>,
    pub dw1: Vec<f64>,
    pub dw2: Vec<f64>,
    pub volterra: Vec<f64>,
}

/// Builds one path from its standard normals: per step `(z_W¹, z_I, z_W²)`.
/// Entries of `variance` up to index `i` only read normals of steps `< i`.
pub fn rbergomi_path_from_normals(model: &RoughBergomiModel, plan: &VolterraKernelPlan, normals: &[[f64; 3]]) -> RoughBergomiPath {
    let grid = plan.grid();
    let steps = grid.steps();
    assert_eq!(normals.len(), steps, "one normal triple per step");
    let mut dw1 = vec![0.0; steps];
    let mut near = vec![0.0; steps];
    let mut dw2 = vec![0.0; steps];
    for (j, z) in normals.iter().enumerate() {
        let [sd, l21, l22] = plan.near_factor(j);
        dw1[j] = sd * z[0];
        near[j] = l21 * z[0] + l22 * z[1];
        dw2[j] = sd * z[2];
    }
    let mut volterra = vec![0.0; steps + 1];
    plan.volterra_path(&dw1, &near, &mut volterra);
    let (eta, two_h) = (model.eta, 2.0 * model.hurst);
    let variance: Vec<f64> = (0..=steps)
        .map(|i| {
            let t = grid.times()[i];
            model.xi0.at(t) * (eta * volterra[i] - 0.5 * eta * eta * t.powf(two_h)).exp()
        })
        .collect();
    let (rho1, rho2) = (model.rho1, model.rho2());
    let mut log_price = vec![0.0; steps + 1];
    log_price[0] = model.log_spot();
    for i in 0..steps {
        let v = variance[i];
        log_price[i + 1] =
            log_price[i] + (model.rate - 0.5 * v) * grid.deltas()[i] + v.sqrt() * (rho1 * dw1[i] + rho2 * dw2[i]);
    }
    RoughBergomiPath {
        log_price,
        variance,
        dw1,
        dw2,
        volterra,
    }
}

/// Normals of path `j`, drawn sequentially from its own stream.
pub fn rbergomi_normals(seeds: &SeedSpec, path: usize, steps: usize) -> Vec<[f64; 3]> {
    let mut rng = seeds.path_stream(path);
    (0..steps)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let c: f64 = rng.sample(StandardNormal);
            [a, b, c]
        })
        .collect()
}

/// Simulates `n` rough Bergomi paths. `dw[·,i,0]` is `ΔW¹`, `dw[·,i,1]` is `ΔW²`.
pub fn simulate_rbergomi_paths(
    model: &RoughBergomiModel,
    plan: &VolterraKernelPlan,
    grid: &TimeGrid,
    n: usize,
    seeds: &SeedSpec,
) -> Result<PathBatch> {
    model.validate()?;
    if plan.grid() != grid {
        return Err(Error::invalid("Volterra plan was built on a different grid"));
    }
    if (plan.hurst() - model.hurst).abs() > 0.0 {
        return Err(Error::invalid("Volterra plan and model have different Hurst parameters"));
    }
    let steps = grid.steps();
    let mut states = Array3::zeros((n, steps + 1, 1));
    let mut variance = Array2::zeros((n, steps + 1));
    let mut volterra = Array2::zeros((n, steps + 1));
    let mut dw = Array3::zeros((n, steps, 2));
    states
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(variance.axis_iter_mut(Axis(0)))
        .zip(volterra.axis_iter_mut(Axis(0)))
        .zip(dw.axis_iter_mut(Axis(0)))
        .enumerate()
        .for_each(|(j, (((mut x, mut v), mut w), mut inc))| {
            let normals = rbergomi_normals(seeds, j, steps);
            let p = rbergomi_path_from_normals(model, plan, &normals);
            for i in 0..=steps {
                x[[i, 0]] = p.log_price[i];
                v[i] = p.variance[i];
                w[i] = p.volterra[i];
            }
            for i in 0..steps {
                inc[[i, 0]] = p.dw1[i];
                inc[[i, 1]] = p.dw2[i];
            }
        });
    Ok(PathBatch {
        states,
        variance: Some(variance),
        dw,
        volterra: Some(volterra),
    })
}

impl PathModel for RoughBergomiModel {
    fn rate(&self) -> f64 {
        self.rate
    }

    fn simulate_paths(&self, grid: &TimeGrid, n: usize, seeds: &SeedSpec) -> Result<PathBatch> {
        let plan = build_volterra_plan(self.hurst, grid)?;
        simulate_rbergomi_paths(self, &plan, grid, n, seeds)
    }

    fn terminal_states(&self, grid: &TimeGrid, paths: Range<usize>, seeds: &SeedSpec) -> Result<Array2<f64>> {
        self.validate()?;
        let plan = build_volterra_plan(self.hurst, grid)?;
        let steps = grid.steps();
        let mut out = Array2::zeros((paths.len(), 1));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut row)| {
                let normals = rbergomi_normals(seeds, paths.start + r, steps);
                row[0] = rbergomi_path_from_normals(self, &plan, &normals).log_price[steps];
            });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_uniform_grid;

    fn standard_model() -> RoughBergomiModel {
        RoughBergomiModel::new(0.3, 1.9, -0.7, 0.01, 1.0, ForwardVariance::flat(0.235 * 0.235)).unwrap()
    }

    #[test]
    fn zero_vol_of_vol_gives_forward_variance() {
        let mut m = standard_model();
        m.eta = 0.0;
        let g = make_uniform_grid(1.0, 8).unwrap();
        let plan = build_volterra_plan(0.3, &g).unwrap();
        let p = simulate_rbergomi_paths(&m, &plan, &g, 50, &SeedSpec::new(1)).unwrap();
        assert!(p.variance.unwrap().iter().all(|v| *v == 0.235 * 0.235));
    }

    #[test]
    fn variance_is_a_wick_martingale() {
        let m = standard_model();
        let g = make_uniform_grid(1.0, 21).unwrap();
        let plan = build_volterra_plan(0.3, &g).unwrap();
        let n = 50_000;
        let p = simulate_rbergomi_paths(&m, &plan, &g, n, &SeedSpec::new(2)).unwrap();
        let var = p.variance.unwrap();
        let xi = 0.235 * 0.235;
        for i in 0..=21 {
            let col = var.column(i);
            let mean = col.mean().unwrap();
            let se = (col.var(1.0) / n as f64).sqrt();
            assert!((mean - xi).abs() <= 5.0 * se + 1e-12 * xi, "i={i}: {mean} ± {se}");
            assert!(col.iter().all(|v| *v >= 0.0));
        }
        let w = p.volterra.unwrap();
        let wt = w.column(21);
        let s2 = wt.var(1.0);
        assert!((s2 - 1.0).abs() < 5.0 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn variance_is_adapted() {
        let m = standard_model();
        let g = make_uniform_grid(1.0, 12).unwrap();
        let plan = build_volterra_plan(0.3, &g).unwrap();
        let base = rbergomi_normals(&SeedSpec::new(5), 0, 12);
        let p0 = rbergomi_path_from_normals(&m, &plan, &base);
        for cut in 0..12 {
            let mut perturbed = base.clone();
            for z in perturbed.iter_mut().skip(cut) {
                *z = [z[0] + 1.0, -z[1], z[2] * 2.0];
            }
            let p1 = rbergomi_path_from_normals(&m, &plan, &perturbed);
            for i in 0..=cut {
                assert_eq!(p0.variance[i].to_bits(), p1.variance[i].to_bits());
            }
        }
    }

    #[test]
    fn brownian_case_matches_direct_simulation() {
        let mut m = standard_model();
        m.hurst = 0.5;
        let g = make_uniform_grid(1.0, 21).unwrap();
        let plan = build_volterra_plan(0.5, &g).unwrap();
        let p = simulate_rbergomi_paths(&m, &plan, &g, 200, &SeedSpec::new(7)).unwrap();
        let (xi, eta) = (0.235f64 * 0.235, 1.9);
        for j in 0..200 {
            let mut w = 0.0;
            let mut x = 0.0;
            for i in 0..=21 {
                let t = g.times()[i];
                let v = xi * (eta * w - 0.5 * eta * eta * t).exp();
                let vs = p.variance.as_ref().unwrap()[[j, i]];
                assert!((v - vs).abs() <= 1e-12 * v.max(1.0), "path {j} step {i}");
                assert!((x - p.states[[j, i, 0]]).abs() <= 1e-12);
                if i < 21 {
                    let (d1, d2) = (p.dw[[j, i, 0]], p.dw[[j, i, 1]]);
                    x += (0.01 - 0.5 * v) * g.deltas()[i] + v.sqrt() * (-0.7 * d1 + m.rho2() * d2);
                    w += d1;
                }
            }
        }
    }

    #[test]
    fn streamed_terminals_match_the_batch() {
        let m = standard_model();
        let g = make_uniform_grid(1.0, 6).unwrap();
        let s = SeedSpec::new(8);
        let batch = m.simulate_paths(&g, 25, &s).unwrap();
        let part = m.terminal_states(&g, 5..25, &s).unwrap();
        for r in 0..20 {
            assert_eq!(part[[r, 0]].to_bits(), batch.states[[5 + r, 6, 0]].to_bits());
        }
    }

    #[test]
    fn rejects_mismatched_plan() {
        let m = standard_model();
        let g = make_uniform_grid(1.0, 4).unwrap();
        let plan = build_volterra_plan(0.3, &make_uniform_grid(1.0, 5).unwrap()).unwrap();
        assert!(simulate_rbergomi_paths(&m, &plan, &g, 2, &SeedSpec::new(0)).is_err());
    }

    #[test]
    fn forward_variance_curve() {
        let c = ForwardVariance::Linear {
            knots: vec![(0.0, 0.04), (1.0, 0.06)],
        };
        assert!((c.at(0.5) - 0.05).abs() < 1e-15);
        assert_eq!(c.at(2.0), 0.06);
        assert!(RoughBergomiModel::new(0.3, 1.0, 0.0, 0.0, 1.0, ForwardVariance::flat(-1.0)).is_err());
        assert!(RoughBergomiModel::new(0.3, 1.0, 1.2, 0.0, 1.0, ForwardVariance::flat(0.04)).is_err());
    }
}
