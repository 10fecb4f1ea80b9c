//! Riemann–Liouville Volterra process `Ŵ_t = √(2H) ∫_0^t (t−u)^{H−1/2} dW_u`,
//! normalized so that `Var(Ŵ_t) = t^{2H}`.
//!
//! The simulation plan is a hybrid scheme of order one: over the most recent
//! step the pair `(ΔW_j, I_j)` with `I_j = ∫_{t_j}^{t_{j+1}} (t_{j+1}−u)^{H−1/2} dW_u`
//! is drawn from its exact Gaussian law, and each older step contributes
//! `w_ij ΔW_j` with `w_ij² δ_j = ∫_{t_j}^{t_{j+1}} (t_i−u)^{2H−1} du`. With that
//! choice the plan's variance telescopes to `t_i^{2H}` exactly.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::quadrature::integrate;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::Cholesky;
use crate::rng::{Purpose, SeedSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct VolterraKernelPlan {
    h: f64,
    grid: TimeGrid,
    /// Per step: `(√δ, l21, l22)`, the lower Cholesky factor of
    /// `Cov(ΔW_j, I_j)` with the `ΔW_j` entry first.
    near: Vec<[f64; 3]>,
    /// `history[i][j]` weights `ΔW_j` in `Ŵ_{t_i}` for `j + 1 < i`.
    history: Vec<Vec<f64>>,
}

pub fn build_volterra_plan(h: f64, grid: &TimeGrid) -> Result<VolterraKernelPlan> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::invalid(format!("Hurst parameter must lie in (0, 1), got {h}")));
    }
    let t = grid.times();
    let two_h = 2.0 * h;
    let alpha = h + 0.5;
    let near = grid
        .deltas()
        .iter()
        .map(|&d| {
            let sd = d.sqrt();
            if h == 0.5 {
                // the kernel is 1: I_j = ΔW_j
                return [sd, sd, 0.0];
            }
            let cov = d.powf(alpha) / alpha;
            let var_i = d.powf(two_h) / two_h;
            let l21 = cov / sd;
            let l22 = (var_i - l21 * l21).max(0.0).sqrt();
            [sd, l21, l22]
        })
        .collect();
    let history = (0..t.len())
        .map(|i| {
            (0..i.saturating_sub(1))
                .map(|j| {
                    let mass = ((t[i] - t[j]).powf(two_h) - (t[i] - t[j + 1]).powf(two_h)) / two_h;
                    (mass / grid.deltas()[j]).sqrt()
                })
                .collect()
        })
        .collect();
    Ok(VolterraKernelPlan {
        h,
        grid: grid.clone(),
        near,
        history,
    })
}

impl VolterraKernelPlan {
    pub fn hurst(&self) -> f64 {
        self.h
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Lower factor `(√δ_j, l21, l22)` of the step-`j` pair covariance.
    pub fn near_factor(&self, j: usize) -> [f64; 3] {
        self.near[j]
    }

    pub fn history_weights(&self, i: usize) -> &[f64] {
        &self.history[i]
    }

    /// `Var(Ŵ_{t_i})` as implied by the plan's coefficients.
    pub fn implied_variance(&self, i: usize) -> f64 {
        if i == 0 {
            return 0.0;
        }
        let [_, l21, l22] = self.near[i - 1];
        let hist: f64 = self.history[i]
            .iter()
            .zip(self.grid.deltas())
            .map(|(w, d)| w * w * d)
            .sum();
        2.0 * self.h * (l21 * l21 + l22 * l22 + hist)
    }

    /// `t_i^{2H}`, the exact variance of `Ŵ_{t_i}`.
    pub fn exact_variance(&self, i: usize) -> f64 {
        self.grid.times()[i].powf(2.0 * self.h)
    }

    /// `Ŵ` on the grid from the Brownian increments `dw1` and the step
    /// integrals `near`, both of length `N`. `out` has length `N + 1`.
    pub fn volterra_path(&self, dw1: &[f64], near: &[f64], out: &mut [f64]) {
        let scale = (2.0 * self.h).sqrt();
        out[0] = 0.0;
        for i in 1..out.len() {
            let mut acc = near[i - 1];
            for (w, d) in self.history[i].iter().zip(dw1) {
                acc += w * d;
            }
            out[i] = scale * acc;
        }
    }
}

/// `Cov(Ŵ_s, Ŵ_t) = 2H ∫_0^{s∧t} (s−u)^{H−1/2} (t−u)^{H−1/2} du`, by adaptive
/// quadrature after the substitution `s∧t − u = v^{1/(H+1/2)}`.
pub fn volterra_covariance(h: f64, s: f64, t: f64) -> f64 {
    let (s, t) = if s <= t { (s, t) } else { (t, s) };
    if s <= 0.0 {
        return 0.0;
    }
    let alpha = h + 0.5;
    let gap = t - s;
    let upper = s.powf(alpha);
    // after the first substitution the integrand is (gap + v^{1/α})^{H−1/2}/α,
    // which behaves like v^β near 0 when gap = 0
    let beta = (h - 0.5) / alpha;
    let p = if beta < 0.0 { 1.0 / (1.0 + beta) } else { 1.0 };
    let f = |y: f64| {
        if y <= 0.0 && beta < 0.0 {
            // limit of the integrand times the Jacobian as y → 0 on the diagonal
            return if gap == 0.0 { upper.powf(beta) * upper * p / alpha } else { 0.0 };
        }
        let v = upper * y.powf(p);
        let jac = upper * p * y.powf(p - 1.0);
        (gap + v.powf(1.0 / alpha)).powf(h - 0.5) / alpha * jac
    };
    2.0 * h * integrate(f, 0.0, 1.0, 1e-14 * s.powf(2.0 * h).max(1e-300))
}

/// Joint draws of `(Ŵ_{t_0}, …, Ŵ_{t_N})` with the exact covariance, `n × (N+1)`.
pub fn cholesky_volterra_oracle(h: f64, grid: &TimeGrid, n: usize, seeds: &SeedSpec) -> Result<Array2<f64>> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::invalid(format!("Hurst parameter must lie in (0, 1), got {h}")));
    }
    let cov = volterra_covariance_matrix(h, grid);
    let chol = Cholesky::factor_with_jitter(cov.view(), [1e-14, 1e-13, 1e-12, 1e-11, 1e-10])?;
    let l = chol.lower();
    let steps = grid.steps();
    let mut out = Array2::zeros((n, steps + 1));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(j, mut row)| {
            let mut rng = seeds.stream(Purpose::Oracle, j as u64);
            let z: Array1<f64> = (0..steps).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for a in 0..steps {
                let mut v = 0.0;
                for b in 0..=a {
                    v += l[[a, b]] * z[b];
                }
                row[a + 1] = v;
            }
        });
    Ok(out)
}

/// Covariance of `(Ŵ_{t_1}, …, Ŵ_{t_N})`.
pub fn volterra_covariance_matrix(h: f64, grid: &TimeGrid) -> Array2<f64> {
    let t = &grid.times()[1..];
    let m = t.len();
    let mut cov = Array2::zeros((m, m));
    for a in 0..m {
        for b in 0..=a {
            let c = volterra_covariance(h, t[b], t[a]);
            cov[[a, b]] = c;
            cov[[b, a]] = c;
        }
    }
    cov
}
