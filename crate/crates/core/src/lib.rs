//! Causal structure identification for controlled dynamical systems.
//!
//! A model of the plant is fitted from excitation data, then for every
//! candidate cause the plant is steered into designed initial conditions
//! (or driven by designed inputs) and paired experiments are compared with a
//! kernel two-sample statistic.

pub mod causal;
pub mod cli;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod expdesign;
pub mod kernels;
pub mod rng;
pub mod scenario;
pub mod sysid;

pub use error::{Error, Result};
