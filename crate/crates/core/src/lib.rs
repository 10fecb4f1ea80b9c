//! Backward random-feature regression solvers for European option pricing.
//!
//! Each backward time step of a pricing PDE (Markovian case) or rough-volatility
//! BSPDE (non-Markovian case) is reduced to one ridge least-squares fit of a
//! linear readout on top of a frozen random ReLU basis.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmarks;
pub mod driver;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod linalg;
pub mod markovian;
pub mod models;
pub mod nonmarkovian;
pub mod paths;
pub mod reservoir;
pub mod rls;
pub mod rng;
pub mod solver;
pub mod sorted_moments;

pub use error::{Error, Result};
pub use grid::{make_uniform_grid, TimeGrid};
pub use paths::{sample_correlated_increments, PathBatch};
pub use reservoir::{sample_reservoir, Readout, Reservoir, ReservoirConfig};
pub use rls::{ridge_solve, MomentAccumulator, Ridge, RidgeSolution};
pub use rng::SeedSpec;
