//! Voltage-stability toolkit: power flow, holomorphic continuation, stochastic
//! load models, power-system dynamics, covariance prediction and variance-based
//! reactive-power control.

pub mod error;
pub mod exec;
pub mod grid;
pub mod linalg;
pub mod powerflow;
pub mod helm;
pub mod stochastic;
pub mod dynamics;
pub mod covariance;
pub mod controllers;
pub mod harness;

pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::{BusId, BusKind, Network};
