//! Simulation laboratory for branching mass transport in a heavy-tailed
//! random catalytic medium.
//!
//! The crate is organised around six building blocks:
//!
//! * [`medium`] — sampler and point-field queries for the γ-stable random
//!   medium (atoms with heavy-tailed weights, unit-ball smoothing).
//! * [`brownian`] — heat kernel, spectral heat semigroup on a periodic box,
//!   and path-based estimators (hitting probabilities, occupation-time
//!   moments, energy functionals).
//! * [`pde`] — scaled log-Laplace solvers (nonlinear, linearised pair) and the
//!   limiting mild equation / multi-time fluctuation functional.
//! * [`constants`] — closed-form and Monte Carlo limit constants entering the
//!   fluctuation bounds.
//! * [`reactant`] — branching particle approximation of the reactant process
//!   in a frozen medium.
//! * [`harness`] — experiment configs, sweep/LLN/variance drivers, CSV and
//!   JSON report output.
//!
//! Everything that draws randomness takes an explicit `u64` seed and derives
//! per-item streams through [`rng::derive_seed`], so reruns are bit-identical
//! regardless of worker count.

pub mod brownian;
pub mod constants;
pub mod error;
pub mod estimator;
pub mod geom;
pub mod grid;
pub mod harness;
pub mod medium;
pub mod pde;
pub mod quad;
pub mod reactant;
pub mod rng;
pub mod testfn;

pub use error::{Error, Result};
