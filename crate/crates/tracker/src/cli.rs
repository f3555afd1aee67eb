use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::list::LivenessPolicy;
use crate::procedures::ExecHook;
use crate::server::{load_blocklist, start, TrackerConfig};
use crate::TrackerError;

#[derive(Debug, Parser)]
#[command(name = "tracker", about = "Volunteer computing tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the tracker until killed.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = vc_core::protocol::DEFAULT_TRACKER_PORT)]
    pub port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    pub host: String,
    #[arg(long, default_value = "tracker-data")]
    pub data_dir: PathBuf,
    /// Ping period in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub ping_interval: f64,
    /// Consecutive missed pings before a host is removed.
    #[arg(long, default_value_t = 5)]
    pub max_misses: u32,
    /// Seconds between list pushes.
    #[arg(long, default_value_t = 10.0)]
    pub push_interval: f64,
    /// File with one blocked node id per line.
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
    /// Shell command consulted on each new host; exit 1 vetoes it.
    #[arg(long)]
    pub val_hook: Option<String>,
}

fn seconds(name: &str, v: f64) -> Result<Duration, TrackerError> {
    Duration::try_from_secs_f64(v)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| TrackerError::Config(format!("{name} must be a positive number of seconds")))
}

impl ServeArgs {
    pub fn config(&self) -> Result<TrackerConfig, TrackerError> {
        let bind: SocketAddr = format!("{}:{}", self.host, self.port)
            .parse()
            .map_err(|e| TrackerError::Config(format!("bind address: {e}")))?;
        let mut cfg = TrackerConfig::new(bind, &self.data_dir);
        cfg.liveness = LivenessPolicy::new(seconds("ping-interval", self.ping_interval)?, self.max_misses)?;
        cfg.push_interval = seconds("push-interval", self.push_interval)?;
        if let Some(path) = &self.blocklist {
            cfg.blocklist = load_blocklist(path)?;
        }
        if let Some(cmd) = &self.val_hook {
            cfg.hook = Some(Arc::new(ExecHook { command: cmd.clone() }));
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), TrackerError> {
    match cli.command {
        Command::Serve(args) => {
            let handle = start(args.config()?)?;
            println!("tracker {} listening on {}", handle.node(), handle.addr());
            handle.wait();
            Ok(())
        }
    }
}
