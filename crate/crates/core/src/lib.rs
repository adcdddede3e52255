//! Predictive-PID ratio control for two-input two-output first-order-plus-dead-time
//! processes with unequal input delays.
//!
//! The pipeline is: discretize the plant and build the error-coordinate
//! state-space model ([`fopdt_model`]), solve the ratio-weighted
//! finite-horizon GPC problem ([`gpc_core`]), turn the delayed receding-horizon
//! law into a gain-scheduled PID controller ([`pid_schedule`]), certify the
//! delayed closed loop ([`stability`]) and simulate it against baseline ratio
//! controllers ([`simulator`]). [`tuning`] wraps the practical weight-selection
//! procedure.

pub mod error;
pub mod fopdt_model;
pub mod gpc_core;
pub mod pid_schedule;
pub mod simulator;
pub mod stability;
pub mod tuning;

pub use error::{Error, Result};
