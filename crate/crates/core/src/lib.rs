//! Deterministic kinetic solver for the bosonic Boltzmann-Nordheim
//! equation on the periodic unit interval with three-dimensional
//! velocities, built through the Haldane-statistics alpha-approximation.

pub mod checks;
pub mod collision;
pub mod config;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod integrator;
pub mod kernel;
pub mod phase_grid;
pub mod prepare;
pub mod snapshot;
pub mod statistics;
pub mod summation;
pub mod transport;

pub use error::{Error, Result};
