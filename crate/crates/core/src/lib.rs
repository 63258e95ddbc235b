//! Partially observed forward-backward stochastic control: simulation,
//! adjoint equations and near-optimality certificates.

#![allow(clippy::needless_range_loop)]

pub mod bsde;
pub mod config;
pub mod error;
pub mod forward;
pub mod hamiltonian;
pub mod model;
pub mod nearopt;
pub mod optimizer;
pub mod oracle;
pub mod paths;
pub mod regression;
pub mod stats;

pub use error::{Error, Result};
