use std::path::PathBuf;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::cluster::Binaries;
use crate::report::{emit_report, Format};
use crate::run::{fault_inject, run_scenario, Fault};
use crate::scenario::{NodeSpec, ScenarioConfig, ScenarioKind};
use crate::HarnessError;

#[derive(Debug, Parser)]
#[command(name = "vc", about = "Run prime-search scenarios on local processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Top,
}

#[derive(Debug, Subcommand)]
pub enum Top {
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Run scenario I, II, III or IV to completion.
    Run(Common),
    /// Run a scenario with one fault active.
    Fault(FaultArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// I, II, III or IV.
    pub scenario: ScenarioKind,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Also time a sequential search of the same parts.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value = "table")]
    pub report: Format,
    /// Run directory; defaults to vc-runs/<scenario>-<time>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub m_min: u32,
    #[arg(long, default_value_t = 1)]
    pub m_max: u32,
    #[arg(long, default_value_t = 30.0)]
    pub work_timeout: f64,
    /// Keep each application file between cycles.
    #[arg(long)]
    pub cache_app: bool,
    /// Extra clients leeching every app; repeatable.
    #[arg(long)]
    pub add_leecher: Vec<String>,
    /// Tracker ping period in seconds.
    #[arg(long, default_value_t = 2.0)]
    pub ping_interval: f64,
    #[arg(long, default_value_t = 3)]
    pub max_misses: u32,
}

#[derive(Debug, Args)]
pub struct FaultArgs {
    #[command(flatten)]
    pub common: Common,
    /// NODE@PART: kill the leecher once it is assigned part PART or later.
    #[arg(long, group = "fault")]
    pub kill: Option<String>,
    /// NODE@RATE: the node corrupts this fraction of its results.
    #[arg(long, group = "fault")]
    pub corrupt: Option<String>,
    /// NODE@SECONDS: freeze the seeder after this many seconds.
    #[arg(long, group = "fault")]
    pub mute: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn split_at(s: &str) -> Result<(String, &str), HarnessError> {
    s.split_once('@')
        .map(|(n, v)| (n.to_string(), v))
        .ok_or_else(|| HarnessError::Config(format!("expected NODE@VALUE, got {s:?}")))
}

fn value<T: std::str::FromStr>(v: &str) -> Result<T, HarnessError> {
    v.parse().map_err(|_| HarnessError::Config(format!("bad fault value {v:?}")))
}

impl FaultArgs {
    pub fn fault(&self) -> Result<Fault, HarnessError> {
        if let Some(s) = &self.kill {
            let (node, v) = split_at(s)?;
            return Ok(Fault::KillLeecher { node, at_part: value(v)? });
        }
        if let Some(s) = &self.corrupt {
            let (node, v) = split_at(s)?;
            return Ok(Fault::CorruptResult { node, rate: value(v)?, seed: self.seed });
        }
        if let Some(s) = &self.mute {
            let (node, v) = split_at(s)?;
            let secs: f64 = value(v)?;
            let after = Duration::try_from_secs_f64(secs).map_err(|e| HarnessError::Config(e.to_string()))?;
            return Ok(Fault::MuteSeeder { node, after });
        }
        Err(HarnessError::Config("one of --kill, --corrupt or --mute is required".into()))
    }
}

impl Common {
    pub fn config(&self) -> Result<ScenarioConfig, HarnessError> {
        let out = self.out.clone().unwrap_or_else(|| {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            PathBuf::from("vc-runs").join(format!("{}-{now}", self.scenario))
        });
        let mut cfg = ScenarioConfig::preset(self.scenario, self.scale, out)?;
        cfg.baseline = self.baseline;
        cfg.m_min = self.m_min;
        cfg.m_max = self.m_max;
        cfg.work_timeout = self.work_timeout;
        cfg.cache_app = self.cache_app;
        cfg.ping_interval = Duration::try_from_secs_f64(self.ping_interval).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.max_misses = self.max_misses;
        cfg.roster.extend(self.add_leecher.iter().map(|n| NodeSpec::leecher(n)));
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), HarnessError> {
    let bins = Binaries::beside_current_exe()?;
    let Top::Scenario(cmd) = cli.command;
    let (common, report) = match &cmd {
        ScenarioCommand::Run(c) => (c, run_scenario(&c.config()?, &bins)?),
        ScenarioCommand::Fault(f) => (&f.common, fault_inject(&f.common.config()?, &bins, &f.fault()?)?),
    };
    print!("{}", emit_report(&report, common.report));
    Ok(())
}
