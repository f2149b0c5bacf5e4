//! Closed-loop simulation: signals, integrators, the coupled loop and the
//! experiment runners.

mod closed_loop;
pub mod config;
mod integrate;
pub mod scenarios;
pub mod signals;
pub mod trace;

pub use closed_loop::run_scenario;
pub use scenarios::run_batch;
pub use config::{ControllerKind, ReferenceProfile, ScenarioConfig, StepChange};
pub use integrate::{phi_functions, rk4_step, AffinePropagator};
pub use signals::{DisturbanceComponent, DisturbanceProfile, NoiseKind, NoiseProfile};
pub use trace::{CsvTable, SimulationTrace, TraceMeta};
