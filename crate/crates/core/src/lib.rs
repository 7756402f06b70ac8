//! Sequential Bayesian design of monitoring-well locations for a CO₂ plume.
//!
//! A conditional normalizing flow and a well-placement density are trained
//! jointly on simulated plume forecasts; the density picks where to drill, the
//! flow turns field observations into posterior plume samples, and the posterior
//! seeds the next forecast cycle.

pub mod audit;
pub mod design;
mod error;
mod field;
pub mod flow;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sim;
pub mod twin;

pub use error::{Error, Result};
pub use field::ScalarField2D;

/// How per-sample work inside a batch is scheduled. Reductions always run in
/// sample order, so both modes give bit-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

impl Execution {
    pub fn from_deterministic(deterministic: bool) -> Self {
        if deterministic {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}
