//! Learning a lattice density functional for the Fermi-Hubbard ring from
//! noisy, simulated quantum-algorithm data.

pub mod baseline;
pub mod benchmark;
pub mod dataset;
pub mod density;
pub mod error;
pub mod exact;
pub mod lattice;
pub mod measurement;
pub mod model;
pub mod operators;
pub mod pipeline;
pub mod quasi_newton;
pub mod rng;
pub mod rotation;
pub mod training;
pub mod vqe;

pub use error::{Error, Result};
