//! Case-study scenarios: configuration, simulation, traces and reports.

pub mod config;
pub mod metrics;
pub mod runner;
pub mod stability;
pub mod sweep;
pub mod trace;

pub use config::ScenarioConfig;
pub use metrics::SummaryMetrics;
pub use runner::{run_scenario, run_scenario_with, RunOptions, RunOutput};
pub use stability::{check_stability, StabilityCheck};
pub use sweep::{sweep, SweepParam, SweepTable};
