//! Ground states and probabilistic harmonic functions for recurrent
//! symmetric (relativistic) alpha-stable processes on the line with local
//! and non-local Feynman-Kac perturbations.
//!
//! The crate has two computational pipelines over one shared jump kernel:
//!
//! * **forms** — discretized quadratic forms on a truncated grid: the base
//!   Dirichlet form, the killed form, the Schrodinger form, the
//!   creation-symmetrized form, discrete Green operators, and the principal
//!   eigenpair `(lambda, h)` of the variational problem.
//! * **montecarlo** — jump-resolved path simulation with exponentially
//!   weighted killing, additive-functional accumulators, and Feynman-Kac /
//!   gauge / occupation estimators.
//!
//! The `verify` module runs both pipelines against each other and turns the
//! structural identities (Levy system, ground-state bounds, harmonicity,
//! gauge/spectral equivalence, Green cross-check) into pass/fail reports.
//! See the `examples/` directory for one runnable driver per capability and
//! the `stable-schrodinger` binary for the config-driven command line.

pub mod config;
pub mod error;
pub mod forms;
pub mod grid;
pub mod interp;
pub mod kernels;
pub mod montecarlo;
pub mod perturbations;
pub mod run;
pub mod verify;

mod quad;
mod special;

pub use error::{Error, Result};
pub use grid::Grid;
pub use kernels::{ProcessSpec, TruncationStats};
pub use perturbations::{Bump, DecomposedPerturbation, LocalMeasure, NonlocalPerturbation};
