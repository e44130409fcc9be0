//! Numerical laboratory for regularized equilibria of time-inconsistent
//! stochastic control problems.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod annealing;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fixed_point;
pub mod gibbs;
pub mod grid;
pub mod problem;
pub mod quadrature;
pub mod verifier;

pub use error::{LabError, Result};
