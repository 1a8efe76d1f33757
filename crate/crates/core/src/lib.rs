//! Hamiltonian-conditioned encoder-decoder transformer for Rydberg atom
//! array measurement data, with an exact-diagonalization oracle.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod exact;
pub mod lattice;
pub mod model;
pub mod observables;
pub mod sampling;
pub mod spin;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use lattice::{ExperimentalSettings, InteractionGraph, LatticeSpec};
pub use spin::SpinConfiguration;
