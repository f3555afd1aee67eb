//! Volunteer agent: seeds its own applications to other volunteers and
//! leeches theirs, coordinating through the tracker.

pub mod agent;
pub mod appspec;
pub mod assign;
pub mod cli;
pub mod leecher;
pub mod net;
pub mod runner;
pub mod seeder;
pub mod store;
pub mod vote;

pub use agent::{start, AgentConfig, AgentHandle, LeechFilter};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("storage: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
