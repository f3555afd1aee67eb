use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use vc_core::metrics::ValidationPolicy;
use vc_core::protocol::{AppId, NodeId};
use vc_core::workloads::RangeSpec;

use crate::agent::{start, AgentConfig, LeechFilter};
use crate::appspec::{make_prime_app, AppSpec};
use crate::leecher::LeechConfig;
use crate::runner::RunnerSpec;
use crate::seeder::{ExecResultHook, SeedConfig};
use crate::AgentError;

#[derive(Debug, Parser)]
#[command(name = "agent", about = "Volunteer computing agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Join the cloud: seed the given apps and leech others.
    Run(RunArgs),
    /// Write a prime-search app file and data manifest.
    MakeApp(MakeAppArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "127.0.0.1:6888")]
    pub tracker: String,
    #[arg(long, default_value_t = vc_core::protocol::DEFAULT_PEER_PORT)]
    pub peer_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Address announced to the tracker, when it differs from host:port.
    #[arg(long)]
    pub advertise: Option<String>,
    #[arg(long, default_value = "agent-data")]
    pub data_dir: PathBuf,
    /// APP_FILE,MANIFEST; repeatable.
    #[arg(long, num_args = 1..)]
    pub seed: Vec<AppSpec>,
    /// `all`, `none`, or app ids.
    #[arg(long, num_args = 1.., default_value = "all")]
    pub leech: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub m_min: u32,
    #[arg(long, default_value_t = 1)]
    pub m_max: u32,
    /// Seconds before an assigned part is reissued; 10x the app's w if unset.
    #[arg(long)]
    pub work_timeout: Option<f64>,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub cache_app: bool,
    #[arg(long, num_args = 1..)]
    pub deny: Vec<NodeId>,
    /// `builtin` or `exec:CMD`.
    #[arg(long, default_value = "builtin")]
    pub runner: RunnerSpec,
    /// Shell command consulted on each result; exit 1 discards it.
    #[arg(long)]
    pub result_hook: Option<String>,
    /// Seconds between status heartbeats to the tracker.
    #[arg(long, default_value_t = 5.0)]
    pub heartbeat: f64,
    /// Corrupt this fraction of own results (fault injection).
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub fault_corrupt_rate: f64,
    #[arg(long, default_value_t = 0, hide = true)]
    pub fault_seed: u64,
}

#[derive(Debug, Args)]
pub struct MakeAppArgs {
    #[arg(long)]
    pub label: String,
    #[arg(long)]
    pub lo: u64,
    #[arg(long)]
    pub hi: u64,
    #[arg(long)]
    pub parts: u32,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_leech(values: &[String]) -> Result<LeechFilter, AgentError> {
    match values {
        [v] if v == "all" => Ok(LeechFilter::All),
        [v] if v == "none" => Ok(LeechFilter::none()),
        ids => ids
            .iter()
            .map(|s| s.parse::<AppId>().map_err(|e| AgentError::Config(format!("--leech: {e}"))))
            .collect::<Result<HashSet<_>, _>>()
            .map(LeechFilter::Apps),
    }
}

impl RunArgs {
    pub fn config(&self) -> Result<AgentConfig, AgentError> {
        let bind: SocketAddr = format!("{}:{}", self.host, self.peer_port)
            .parse()
            .map_err(|e| AgentError::Config(format!("bind address: {e}")))?;
        let policy = ValidationPolicy::new(self.m_min, self.m_max).map_err(|e| AgentError::Config(e.to_string()))?;
        if let Some(t) = self.work_timeout {
            if !(t.is_finite() && t > 0.0) {
                return Err(AgentError::Config("--work-timeout must be positive".into()));
            }
        }
        let heartbeat = Duration::try_from_secs_f64(self.heartbeat)
            .ok()
            .filter(|d| !d.is_zero())
            .ok_or_else(|| AgentError::Config("--heartbeat must be positive".into()))?;
        let runner = self.runner.build(self.fault_corrupt_rate, self.fault_seed);
        let mut cfg = AgentConfig::new(&self.tracker, &self.data_dir, Arc::from(runner));
        cfg.bind = bind;
        cfg.advertise = self.advertise.clone();
        cfg.seeds = self.seed.iter().map(AppSpec::load).collect::<Result<_, _>>()?;
        cfg.seed = SeedConfig {
            policy,
            work_timeout: self.work_timeout,
            hook: self.result_hook.as_ref().map(|c| Arc::new(ExecResultHook { command: c.clone() }) as _),
        };
        cfg.leech = parse_leech(&self.leech)?;
        cfg.leech_cfg = LeechConfig { cache_app: self.cache_app, ..LeechConfig::default() };
        cfg.deny = self.deny.iter().copied().collect();
        cfg.heartbeat = heartbeat;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), AgentError> {
    match cli.command {
        Command::Run(args) => {
            let handle = start(args.config()?)?;
            println!("agent {} listening on {}", handle.node(), handle.addr());
            for id in handle.seeder().app_ids() {
                println!("seeding {id}");
            }
            handle.wait();
            Ok(())
        }
        Command::MakeApp(a) => {
            let range = RangeSpec::new(a.lo, a.hi, a.parts).map_err(|e| AgentError::Config(e.to_string()))?;
            let (id, spec) = make_prime_app(&a.out, &a.label, &range)?;
            println!("{id} {},{}", spec.app.display(), spec.manifest.display());
            Ok(())
        }
    }
}
