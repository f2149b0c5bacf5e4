//! Dual-loop active disturbance rejection control (DLADRC) for an amplified-laser
//! power loop: plant model, observers, control laws, Lyapunov decay certificates,
//! a deterministic closed-loop simulator and stability metrics.

pub mod bounds;
pub mod cli;
pub mod controller;
pub mod error;
pub mod metrics;
pub mod observers;
pub mod plantmodel;
pub mod sim;

pub use error::{Error, Result};
