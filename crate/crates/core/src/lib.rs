//! Simulation and parameter estimation for continuously monitored open quantum
//! systems with quantum nondemolition (QND) structure.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: block structure, operators, physical parameters and derived
//!   coefficients (Γ table, distinguishability constant).
//! - [`sme`]: Euler–Maruyama integration of the full jump–diffusion stochastic
//!   master equation, record generation and the generator oracle.
//! - [`reduced`]: log-space block-weight dynamics, estimated filters and the
//!   augmented filter bank.
//! - [`rates`]: mismatch functionals, stability conditions and predicted rates.
//! - [`griddesign`]: estimator grids for the diffusive and counting regimes.
//! - [`estimator`]: filter-bank campaigns, outcome classification and interval
//!   refinement.
//! - [`harness`]: configuration files, persistence, manifests and the command
//!   entry points used by the `qnd` binary.

pub mod error;
pub mod estimator;
pub mod griddesign;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod rates;
pub mod reduced;
pub mod rng;
pub mod sme;
pub mod stats;
pub mod target;

pub use error::{Error, Result};
