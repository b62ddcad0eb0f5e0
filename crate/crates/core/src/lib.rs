//! Deterministic simulator for divide-and-shuffle synchronization (DS-Sync) of
//! data-parallel SGD, with a bulk-synchronous baseline, serial-step accounting
//! for ring, tree and parameter-server all-reduce, and empirical checks of the
//! synchronization-scale formulas and convergence bounds.
//!
//! The numeric core is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases at the crate root fix it to `f64`.

pub mod analysis;
pub mod comm;
pub mod error;
pub mod optim;
pub mod param;
pub mod problems;
pub mod scalar;
pub mod schedule;
pub mod sync;

pub use error::{Error, Result};
pub use param::{axpy, mean_of, sq_dist, ParamVector, Seed};
pub use scalar::Scalar;

pub type Params = ParamVector<f64>;
pub type Params32 = ParamVector<f32>;
pub type Optimizer = optim::OptimizerState<f64>;
pub type Problem = problems::Problem<f64>;
pub type Worker = sync::WorkerState<f64>;
pub type Trace = sync::IterationTrace<f64>;
pub type Run = sync::TrainingRun<f64>;
