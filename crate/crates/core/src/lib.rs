//! Model and simulator of a two-node heralded-entanglement link over
//! deployed fiber: the single-click state model and its error budget, a
//! discrete-event simulation of the link sequences, drift and feedback
//! loops, and the calibration flowchart.

pub mod calibration;
pub mod config;
pub mod drift;
pub mod link_sim;
pub mod quantum;
pub mod seed;
pub mod singleclick;

pub use config::{ConfigError, RunConfig, Scenario};
pub use link_sim::{LinkSetup, Mode};
pub use quantum::{BellSign, Detector, Level, Pauli, TwoQubitState};
pub use seed::SeedTree;
pub use singleclick::{LinkParameters, ModelError, PerDetector, PerNode};
