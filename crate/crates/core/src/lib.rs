//! Numerical laboratory for discrete Klein–Gordon chains with a hard quartic
//! on-site potential and their discrete nonlinear Schrödinger (dNLS) envelope
//! reductions.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approximation;
pub mod cli;
pub mod dnls;
pub mod error;
pub mod integrators;
pub mod lattice;
pub mod normal_form;
pub mod solitons;

pub use error::{LabError, Result};
