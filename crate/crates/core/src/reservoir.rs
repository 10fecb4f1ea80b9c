//! Frozen single-hidden-layer ReLU random bases and their linear readouts.
//!
//! A reservoir is the map `Φ(x) = relu(A x + b)` with `A ∈ R^{K×d}` and
//! `b ∈ R^K` drawn once and never trained. Only the readout matrix `Θ` in
//! `Ψ(x) = Θ Φ(x)` is fitted. Derivatives use the almost-everywhere Jacobian
//! `diag(H(Ax + b)) A` with the Heaviside convention `H(0) = 0`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedSpec;

pub const DEFAULT_RANGE: f64 = 1.0;

const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirConfig {
    /// Hidden node count `K`.
    pub nodes: usize,
    /// Input dimension `d`.
    pub input_dim: usize,
    /// Weights and biases are drawn from `U[-R, R]`.
    pub range: f64,
    /// Fraction of entries of `A` that are kept, in `(0, 1]`.
    pub connectivity: f64,
}

impl ReservoirConfig {
    pub fn new(nodes: usize, input_dim: usize) -> Self {
        Self {
            nodes,
            input_dim,
            range: DEFAULT_RANGE,
            connectivity: 1.0,
        }
    }

    pub fn with_range(mut self, range: f64) -> Self {
        self.range = range;
        self
    }

    pub fn with_connectivity(mut self, connectivity: f64) -> Self {
        self.connectivity = connectivity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::invalid("reservoir needs at least one node"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("reservoir input dimension must be positive"));
        }
        if !(self.range > 0.0) || !self.range.is_finite() {
            return Err(Error::invalid(format!("weight range must be positive, got {}", self.range)));
        }
        if !(self.connectivity > 0.0 && self.connectivity <= 1.0) {
            return Err(Error::invalid(format!(
                "connectivity must lie in (0, 1], got {}",
                self.connectivity
            )));
        }
        Ok(())
    }

    /// Number of entries of `A` that survive the connectivity mask.
    pub fn kept_weights(&self) -> usize {
        (self.connectivity * (self.nodes * self.input_dim) as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    weights: Array2<f64>,
    bias: Array1<f64>,
    config: ReservoirConfig,
}

/// Trained readout `Θ ∈ R^{m×K}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub theta: Array2<f64>,
}

impl Readout {
    pub fn new(theta: Array2<f64>) -> Self {
        Self { theta }
    }

    pub fn zeros(outputs: usize, nodes: usize) -> Self {
        Self {
            theta: Array2::zeros((outputs, nodes)),
        }
    }

    pub fn outputs(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Draws a reservoir from the stream of backward step `step`; `role`
/// distinguishes reservoirs that share a step.
pub fn sample_reservoir(config: &ReservoirConfig, seeds: &SeedSpec, step: usize, role: u32) -> Result<Reservoir> {
    config.validate()?;
    let mut rng = seeds.reservoir_stream(step, role);
    let (k, d) = (config.nodes, config.input_dim);
    let dist = Uniform::new_inclusive(-config.range, config.range)
        .map_err(|e| Error::invalid(format!("weight distribution: {e}")))?;
    let mut weights = Array2::from_shape_simple_fn((k, d), || dist.sample(&mut rng));
    let bias = Array1::from_shape_simple_fn(k, || dist.sample(&mut rng));

    let total = k * d;
    let kept = config.kept_weights();
    if kept < total {
        let mut keep = vec![false; total];
        for pos in index::sample(&mut rng, total, kept) {
            keep[pos] = true;
        }
        for (w, keep) in weights.iter_mut().zip(keep) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    Ok(Reservoir { weights, bias, config: *config })
}

impl Reservoir {
    /// Builds a reservoir from explicit weights, mostly for tests and replays.
    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::invalid("weight rows and bias length differ"));
        }
        let range = weights
            .iter()
            .chain(bias.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let nonzero = weights.iter().filter(|v| **v != 0.0).count();
        let config = ReservoirConfig {
            nodes: weights.nrows(),
            input_dim: weights.ncols(),
            range,
            connectivity: (nonzero as f64 / weights.len() as f64).max(f64::MIN_POSITIVE),
        };
        Ok(Self { weights, bias, config })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn config(&self) -> &ReservoirConfig {
        &self.config
    }

    pub fn nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, reservoir expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `A x + b`.
    pub fn preactivation(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut z = self.weights.dot(&x);
        z += &self.bias;
        z
    }

    pub fn features(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.preactivation(x).mapv(relu))
    }

    /// `diag(H(Ax + b)) A`, `K × d`.
    pub fn features_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let z = self.preactivation(x);
        let mut jac = self.weights.clone();
        for (mut row, zk) in jac.axis_iter_mut(Axis(0)).zip(z.iter()) {
            if !(*zk > 0.0) {
                row.fill(0.0);
            }
        }
        Ok(jac)
    }

    /// Features for a batch of inputs, `n × d` in, `n × K` out.
    pub fn features_batch(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let mut z = xs.dot(&self.weights.t());
        z += &self.bias;
        z.mapv_inplace(relu);
        z
    }

    fn check_readout(&self, readout: &Readout) -> Result<()> {
        if readout.theta.ncols() != self.nodes() {
            return Err(Error::invalid(format!(
                "readout has {} columns, reservoir has {} nodes",
                readout.theta.ncols(),
                self.nodes()
            )));
        }
        Ok(())
    }

    /// `Θ Φ(x)`.
    pub fn net_eval(&self, readout: &Readout, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_readout(readout)?;
        Ok(readout.theta.dot(&self.features(x)?))
    }

    /// `Θ diag(H(Ax + b)) A`, `m × d`.
    pub fn net_grad(&self, readout: &Readout, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_readout(readout)?;
        Ok(readout.theta.dot(&self.features_jacobian(x)?))
    }

    /// `Θ Φ(x_j)` for every row of `xs`, `n × m`. Rows are processed in
    /// fixed-size chunks so the `n × K` feature matrix is never formed.
    pub fn net_eval_batch(&self, readout: &Readout, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_readout(readout)?;
        if xs.ncols() != self.input_dim() {
            return Err(Error::invalid("batch input dimension does not match reservoir"));
        }
        let mut out = Array2::zeros((xs.nrows(), readout.outputs()));
        out.axis_chunks_iter_mut(Axis(0), EVAL_CHUNK)
            .into_par_iter()
            .zip(xs.axis_chunks_iter(Axis(0), EVAL_CHUNK))
            .for_each(|(mut o, x)| o.assign(&self.features_batch(x).dot(&readout.theta.t())));
        Ok(out)
    }

    pub fn to_record(&self) -> ReservoirRecord {
        ReservoirRecord {
            config: self.config,
            weights: self.weights.outer_iter().map(|r| r.to_vec()).collect(),
            bias: self.bias.to_vec(),
        }
    }
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// JSON form of a reservoir; `weights` is row-major `K × d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReservoirRecord {
    pub config: ReservoirConfig,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ReservoirRecord {
    pub fn to_reservoir(&self) -> Result<Reservoir> {
        let k = self.weights.len();
        let d = self.weights.first().map_or(0, |r| r.len());
        if self.weights.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged weight matrix"));
        }
        let flat: Vec<f64> = self.weights.iter().flatten().cloned().collect();
        let weights = Array2::from_shape_vec((k, d), flat).map_err(|e| Error::invalid(e.to_string()))?;
        let mut r = Reservoir::from_parts(weights, Array1::from(self.bias.clone()))?;
        r.config = self.config;
        Ok(r)
    }
}
