//! Numerical toolkit for stochastic optimal control driven by martingale
//! fields with spatial parameters: forward state and variational simulation,
//! adjoint BSDE solving by least-squares Monte Carlo, Hamiltonian
//! stationarity checks, and a linear-quadratic specialization with an
//! independent dynamic-programming oracle.
//!
//! The crate is organized around the pipeline
//!
//! ```text
//! field (factor decomposition, local characteristic q)
//!   -> sde (state / variational simulation, path statistics)
//!   -> adjoint (backward costate solve, duality diagnostics)
//!   -> maxprin / lq (stationarity, sufficiency, Riccati synthesis)
//!   -> experiments (configs, named checks, reports, CLI)
//! ```

pub mod adjoint;
pub mod control;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod lq;
pub mod maxprin;
pub mod problem;
pub mod rng;
pub mod sde;
pub mod stats;

pub use control::{ControlDomain, ControlLaw, PathTable};
pub use cost::CostSpec;
pub use error::{Error, Result};
pub use field::{MartingaleField, SigmaFactor};
pub use grid::TimeGrid;
pub use problem::{ControlProblem, Drift};
pub use sde::{Noise, PathBundle};
