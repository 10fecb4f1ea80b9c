//! Affine drivers `f(t, x, y, z¹, z²) = a y + b·z¹ + c·z² + f̃` and payoffs on
//! log-states.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::paths::PathBatch;

type CoefFn = dyn Fn(f64, ArrayView1<f64>) -> f64 + Send + Sync;

/// A scalar coefficient of `(t, x)`.
#[derive(Clone)]
pub enum Coefficient {
    Const(f64),
    Func(Arc<CoefFn>),
}

impl Coefficient {
    pub fn func(f: impl Fn(f64, ArrayView1<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::Func(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: ArrayView1<f64>) -> f64 {
        match self {
            Coefficient::Const(v) => *v,
            Coefficient::Func(f) => f(t, x),
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Const(v) => write!(f, "Const({v})"),
            Coefficient::Func(_) => write!(f, "Func(..)"),
        }
    }
}

/// `b` multiplies every Brownian coordinate of `z¹` by the same scalar; `c`
/// only enters the non-Markovian scheme.
#[derive(Debug, Clone)]
pub struct AffineDriver {
    pub a: Coefficient,
    pub b: Coefficient,
    pub c: Coefficient,
    pub f_tilde: Coefficient,
}

impl AffineDriver {
    /// `f = −r y`: discounting at the risk-free rate.
    pub fn pricing(rate: f64) -> Self {
        Self {
            a: Coefficient::Const(-rate),
            ..Self::zero()
        }
    }

    pub fn zero() -> Self {
        Self {
            a: Coefficient::Const(0.0),
            b: Coefficient::Const(0.0),
            c: Coefficient::Const(0.0),
            f_tilde: Coefficient::Const(0.0),
        }
    }

    pub fn evaluate(&self, t: f64, x: ArrayView1<f64>, y: f64, z1: &[f64], z2: &[f64]) -> f64 {
        let b = self.b.eval(t, x);
        let c = self.c.eval(t, x);
        self.a.eval(t, x) * y + b * z1.iter().sum::<f64>() + c * z2.iter().sum::<f64>() + self.f_tilde.eval(t, x)
    }
}

type PayoffFn = dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync;

/// Terminal condition `g` evaluated on log-states.
#[derive(Clone)]
pub enum Payoff {
    /// `(e^{x_0} − K)⁺` on the first coordinate.
    Call { strike: f64 },
    /// One output per coordinate: `(e^{x_k} − K)⁺`.
    IndependentCalls { strike: f64 },
    /// `(Σ w_k e^{x_k} − K)⁺`.
    BasketCall { weights: Vec<f64>, strike: f64 },
    Constant(f64),
    Custom { outputs: usize, f: Arc<PayoffFn> },
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Call { strike } => write!(f, "Call {{ strike: {strike} }}"),
            Payoff::IndependentCalls { strike } => write!(f, "IndependentCalls {{ strike: {strike} }}"),
            Payoff::BasketCall { weights, strike } => {
                write!(f, "BasketCall {{ weights: {weights:?}, strike: {strike} }}")
            }
            Payoff::Constant(v) => write!(f, "Constant({v})"),
            Payoff::Custom { outputs, .. } => write!(f, "Custom {{ outputs: {outputs} }}"),
        }
    }
}

impl Payoff {
    /// Number of outputs for a `d`-dimensional state.
    pub fn outputs(&self, d: usize) -> usize {
        match self {
            Payoff::IndependentCalls { .. } => d,
            Payoff::Custom { outputs, .. } => *outputs,
            _ => 1,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Payoff::BasketCall { weights, .. } if weights.len() != d => Err(Error::invalid(format!(
                "basket has {} weights for a {d}-dimensional state",
                weights.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: ArrayView1<f64>) -> Array1<f64> {
        match self {
            Payoff::Call { strike } => Array1::from_elem(1, (x[0].exp() - strike).max(0.0)),
            Payoff::IndependentCalls { strike } => x.mapv(|v| (v.exp() - strike).max(0.0)),
            Payoff::BasketCall { weights, strike } => {
                let s: f64 = weights.iter().zip(x.iter()).map(|(w, v)| w * v.exp()).sum();
                Array1::from_elem(1, (s - strike).max(0.0))
            }
            Payoff::Constant(v) => Array1::from_elem(1, *v),
            Payoff::Custom { f, .. } => f(x),
        }
    }
}

/// `g(X_{t_N})` for every path, `n × m`. No clamping is applied.
pub fn terminal_targets(payoff: &Payoff, paths: &PathBatch) -> Result<Array2<f64>> {
    let d = paths.state_dim();
    payoff.validate(d)?;
    let m = payoff.outputs(d);
    let xt = paths.terminal_states();
    let mut out = Array2::zeros((paths.n_paths(), m));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(j, mut row)| row.assign(&payoff.eval(xt.row(j))));
    Ok(out)
}
