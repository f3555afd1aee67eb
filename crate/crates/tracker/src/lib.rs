//! Tracker server: keeps the applications list of every volunteer, checks
//! liveness by ping and pushes list revisions.

pub mod cli;
pub mod list;
pub mod procedures;
pub mod server;
pub mod sync;

pub use list::{ApplicationsList, LivenessPolicy, TrackerState};
pub use server::{start, TrackerConfig, TrackerHandle};
pub use sync::Synchronizer;

pub use vc_core::protocol::codes::UNKNOWN_HOST;

#[derive(Debug, thiserror::Error)]
pub enum TrackerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("persistence failed: {0}")]
    Persistence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
