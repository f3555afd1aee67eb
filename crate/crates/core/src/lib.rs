//! Shared building blocks for the tracker, the agents and the scenario
//! harness: measurement units, the wire protocol, the prime-search workload,
//! the event log and atomic file replacement.

pub mod events;
pub mod metrics;
pub mod persist;
#[cfg(any(test, feature = "proptest"))]
pub mod props;
pub mod protocol;
pub mod workloads;

pub use metrics::{MetricTriple, ValidationPolicy, WorkTotals};
pub use protocol::{AppId, Body, Message, NodeId};
