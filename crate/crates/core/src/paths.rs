//! Brownian increments and simulated path storage.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::Cholesky;
use crate::rng::SeedSpec;

/// Jitter ladder for user-supplied correlation matrices.
pub const CORRELATION_JITTER: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

/// A batch of `n` simulated paths on a shared grid.
///
/// `states[j, i, k]` is coordinate `k` of path `j` at `t_i`; the models in this
/// crate store log-prices there. `dw[j, i, ·]` holds the Brownian increments
/// over `[t_i, t_{i+1}]` that produced the step, on the `√year` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub states: Array3<f64>,
    /// Instantaneous variance per path and grid point (stochastic-volatility
    /// models only), in variance per year.
    pub variance: Option<Array2<f64>>,
    pub dw: Array3<f64>,
    /// The Gaussian Volterra driver of the variance process, when there is one.
    pub volterra: Option<Array2<f64>>,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.states.len_of(Axis(0))
    }

    pub fn n_steps(&self) -> usize {
        self.dw.len_of(Axis(1))
    }

    pub fn state_dim(&self) -> usize {
        self.states.len_of(Axis(2))
    }

    pub fn noise_dim(&self) -> usize {
        self.dw.len_of(Axis(2))
    }

    /// States of all paths at grid index `i`, shape `n × d`.
    pub fn states_at(&self, i: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(1), i)
    }

    pub fn increments_at(&self, i: usize) -> ArrayView2<'_, f64> {
        self.dw.index_axis(Axis(1), i)
    }

    pub fn terminal_states(&self) -> ArrayView2<'_, f64> {
        self.states_at(self.states.len_of(Axis(1)) - 1)
    }

    /// Raw little-endian bytes of every stored array, for bit-level
    /// reproducibility checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |it: &mut dyn Iterator<Item = &f64>| {
            for v in it {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&mut self.states.iter());
        push(&mut self.dw.iter());
        if let Some(v) = &self.variance {
            push(&mut v.iter());
        }
        if let Some(v) = &self.volterra {
            push(&mut v.iter());
        }
        out
    }

    /// Writes the columnar `path,time_index,time,state,variance` CSV. Only the
    /// first state coordinate goes into `state`; multi-asset batches get one
    /// `state_k` column per coordinate instead.
    pub fn write_csv<W: std::io::Write>(&self, grid: &TimeGrid, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.state_dim();
        let mut header = vec!["path".to_string(), "time_index".into(), "time".into()];
        if d == 1 {
            header.push("state".into());
        } else {
            header.extend((0..d).map(|k| format!("state_{k}")));
        }
        header.push("variance".into());
        w.write_record(&header)?;
        for j in 0..self.n_paths() {
            for i in 0..=self.n_steps() {
                let mut rec = vec![j.to_string(), i.to_string(), format!("{}", grid.times()[i])];
                for k in 0..d {
                    rec.push(format!("{}", self.states[[j, i, k]]));
                }
                rec.push(match &self.variance {
                    Some(v) => format!("{}", v[[j, i]]),
                    None => String::new(),
                });
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Validates a correlation matrix (square, symmetric, unit diagonal) and
/// returns its lower Cholesky factor, applying the jitter ladder if needed.
pub fn correlation_factor(corr: ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = corr.nrows();
    if d == 0 || corr.ncols() != d {
        return Err(Error::invalid("correlation matrix must be square and non-empty"));
    }
    for i in 0..d {
        if (corr[[i, i]] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("correlation diagonal entry {i} is not 1")));
        }
        for j in 0..i {
            if (corr[[i, j]] - corr[[j, i]]).abs() > 1e-12 {
                return Err(Error::invalid("correlation matrix is not symmetric"));
            }
            if !(corr[[i, j]].abs() <= 1.0) {
                return Err(Error::invalid("correlation entries must lie in [-1, 1]"));
            }
        }
    }
    Ok(Cholesky::factor_with_jitter(corr, CORRELATION_JITTER)?.into_lower())
}

/// Draws `n` independent paths of increments with per-step law
/// `N(0, δ_i · corr)`, shape `n × N × d_w`.
pub fn sample_correlated_increments(
    grid: &TimeGrid,
    n: usize,
    corr: ArrayView2<f64>,
    seeds: &SeedSpec,
) -> Result<Array3<f64>> {
    let factor = correlation_factor(corr)?;
    Ok(increments_with_factor(grid, 0..n, factor.view(), seeds))
}

/// Increments of the paths with global indices `paths`; row `r` of the result
/// belongs to path `paths.start + r`.
pub(crate) fn increments_with_factor(
    grid: &TimeGrid,
    paths: std::ops::Range<usize>,
    factor: ArrayView2<f64>,
    seeds: &SeedSpec,
) -> Array3<f64> {
    let steps = grid.steps();
    let d = factor.nrows();
    let sqrt_dt: Vec<f64> = grid.deltas().iter().map(|d| d.sqrt()).collect();
    let mut out = Array3::<f64>::zeros((paths.len(), steps, d));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut path)| {
            let mut rng = seeds.path_stream(paths.start + r);
            let mut z = vec![0.0; d];
            for i in 0..steps {
                for zk in z.iter_mut() {
                    *zk = rng.sample(StandardNormal);
                }
                for a in 0..d {
                    let mut v = 0.0;
                    for b in 0..=a {
                        v += factor[[a, b]] * z[b];
                    }
                    path[[i, a]] = v * sqrt_dt[i];
                }
            }
        });
    out
}
