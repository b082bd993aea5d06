//! Deterministic discrete-event simulation of a tipcut network.

pub mod metrics;
pub mod net;
pub mod node;
pub mod run;
pub mod scenario;
pub mod trace;
pub mod workload;

pub use metrics::Metrics;
pub use run::{run, RunOutput};
pub use scenario::{Behavior, DelayModel, FaultSpec, Scenario, ScenarioError};
