//! Ridge-regularized multi-output least squares over random features.
//!
//! The estimator is `β = (Σ Y_j X_jᵀ)(Σ X_j X_jᵀ + λI)⁻¹`. Samples are folded
//! into a [`MomentAccumulator`] and the normal equations are solved with a
//! Cholesky factorization of `Gram + λI`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_estimate, Cholesky};

/// Rows per partial accumulator in [`MomentAccumulator::from_chunks`]. Fixed so
/// that the summation order never depends on the thread count.
pub const CHUNK_ROWS: usize = 2048;

/// Jitter multipliers (of `trace(Gram)/p`) tried when `Gram + λI` does not
/// factor.
const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    /// `Σ X_j X_jᵀ`, `p × p`.
    pub gram: Array2<f64>,
    /// `Σ Y_j X_jᵀ`, `m × p`.
    pub cross: Array2<f64>,
    pub count: usize,
}

impl MomentAccumulator {
    pub fn new(features: usize, outputs: usize) -> Self {
        Self {
            gram: Array2::zeros((features, features)),
            cross: Array2::zeros((outputs, features)),
            count: 0,
        }
    }

    pub fn features(&self) -> usize {
        self.gram.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.cross.nrows()
    }

    /// Adds a batch of rows: `x` is `batch × p`, `y` is `batch × m`.
    pub fn accumulate(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.features() {
            return Err(Error::invalid(format!(
                "feature batch has {} columns, accumulator expects {}",
                x.ncols(),
                self.features()
            )));
        }
        if y.ncols() != self.outputs() {
            return Err(Error::invalid(format!(
                "target batch has {} columns, accumulator expects {}",
                y.ncols(),
                self.outputs()
            )));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::invalid("feature and target batches have different lengths"));
        }
        if x.nrows() == 0 {
            return Ok(());
        }
        general_mat_mul(1.0, &x.t(), &x, 1.0, &mut self.gram);
        general_mat_mul(1.0, &y.t(), &x, 1.0, &mut self.cross);
        self.count += x.nrows();
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if other.features() != self.features() || other.outputs() != self.outputs() {
            return Err(Error::invalid("cannot merge accumulators of different shapes"));
        }
        self.gram += &other.gram;
        self.cross += &other.cross;
        self.count += other.count;
        Ok(())
    }

    /// Accumulates `n` rows produced chunk by chunk. `build` receives the
    /// half-open row range and returns that chunk's features and targets.
    /// Chunks are built in parallel and merged strictly in index order.
    pub fn from_chunks<F>(n: usize, features: usize, outputs: usize, build: F) -> Result<Self>
    where
        F: Fn(std::ops::Range<usize>) -> Result<(Array2<f64>, Array2<f64>)> + Sync,
    {
        let mut acc = MomentAccumulator::new(features, outputs);
        let n_chunks = n.div_ceil(CHUNK_ROWS);
        let group = rayon::current_num_threads().max(1);
        let mut start = 0;
        while start < n_chunks {
            let end = (start + group).min(n_chunks);
            let partials: Vec<Result<MomentAccumulator>> = (start..end)
                .into_par_iter()
                .map(|c| {
                    let rows = c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n);
                    let (x, y) = build(rows)?;
                    let mut part = MomentAccumulator::new(features, outputs);
                    part.accumulate(x.view(), y.view())?;
                    Ok(part)
                })
                .collect();
            for part in partials {
                acc.merge(&part?)?;
            }
            start = end;
        }
        Ok(acc)
    }

    pub fn trace(&self) -> f64 {
        self.gram.diag().sum()
    }

    /// Smallest eigenvalue lower-bound check used by tests: symmetric up to
    /// round-off.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let p = self.features();
        let scale = self.gram.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        (0..p).all(|i| (0..i).all(|j| (self.gram[[i, j]] - self.gram[[j, i]]).abs() <= tol * scale))
    }
}

/// How the ridge strength is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Ridge {
    /// `λ` used as given.
    Absolute(f64),
    /// `λ = factor · trace(Gram) / p`.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-8)
    }
}

impl Ridge {
    pub fn lambda_for(&self, acc: &MomentAccumulator) -> f64 {
        match *self {
            Ridge::Absolute(l) => l,
            Ridge::Relative(f) => {
                let p = acc.features().max(1) as f64;
                f * acc.trace() / p
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            Ridge::Absolute(l) => l,
            Ridge::Relative(f) => f,
        };
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("ridge strength must be non-negative, got {v}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    /// `m × p` coefficients.
    pub beta: Array2<f64>,
    pub lambda: f64,
    /// Extra diagonal shift the factorization needed (0 when none).
    pub jitter: f64,
    /// `‖β(Gram + λI) − Cross‖_F / ‖Cross‖_F`.
    pub residual_norm: f64,
    /// Condition estimate of the factored system matrix.
    pub gram_condition: f64,
}

/// Solves `β (Gram + λI) = Cross`.
pub fn ridge_solve(acc: &MomentAccumulator, lambda: f64) -> Result<RidgeSolution> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let p = acc.features();
    let mut system = acc.gram.clone();
    for i in 0..p {
        system[[i, i]] += lambda;
    }
    let scale = (acc.trace() / p.max(1) as f64).abs();
    let chol = match Cholesky::factor_with_jitter(system.view(), JITTER_LADDER.iter().map(|j| j * scale)) {
        Ok(c) => c,
        Err(_) => {
            let gram_condition = Cholesky::factor_shifted(system.view(), scale * 1e-6)
                .map(|c| condition_estimate(system.view(), &c, 30))
                .unwrap_or(f64::INFINITY);
            return Err(Error::SingularSystem { gram_condition });
        }
    };
    let mut rhs = acc.cross.t().to_owned();
    chol.solve_in_place(&mut rhs);
    let beta = rhs.t().to_owned();

    let fitted = beta.dot(&system);
    let cross_norm = acc.cross.iter().map(|v| v * v).sum::<f64>().sqrt();
    let resid = (&fitted - &acc.cross).iter().map(|v| v * v).sum::<f64>().sqrt();
    let residual_norm = if cross_norm > 0.0 { resid / cross_norm } else { resid };
    let gram_condition = condition_estimate(system.view(), &chol, 30);
    Ok(RidgeSolution {
        beta,
        lambda,
        jitter: chol.jitter(),
        residual_norm,
        gram_condition,
    })
}
