//! Scenario harness: runs a tracker and a roster of agents as local
//! processes over loopback, waits for the prime search to finish and
//! reports cycle counts, times, transfer sizes and published metrics.

pub mod cli;
pub mod cluster;
pub mod report;
pub mod run;
pub mod scenario;

pub use cluster::Binaries;
pub use report::{emit_report, parse_rows, Format, ScenarioReport};
pub use run::{fault_inject, run_scenario, Fault, Layout};
pub use scenario::{AppRange, Leech, NodeSpec, ScenarioConfig, ScenarioKind};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("process: {0}")]
    Spawn(String),
    #[error("watchdog: {0}")]
    Watchdog(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Agent(#[from] vc_agent::AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
