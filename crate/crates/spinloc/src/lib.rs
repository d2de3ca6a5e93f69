//! Simulation and estimation toolkit for locating a single 13C nuclear spin
//! relative to an NV center.
//!
//! Units: frequencies in kHz (nuclear) or MHz (electronic), times in µs,
//! distances in Å, fields in mT, angles in radians.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blochsim;
pub mod calibration;
pub mod error;
pub mod estimation;
pub mod hamiltonian;
pub mod lattice;
pub mod scenario;
pub mod sequences;
pub mod spincore;

pub use error::{Error, Result};
