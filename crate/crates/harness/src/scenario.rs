//! Scenario presets: which applications exist, who seeds and who leeches
//! them, and the protocol settings the processes are started with.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use vc_core::metrics::ValidationPolicy;
use vc_core::workloads::RangeSpec;

use crate::HarnessError;

/// A prime-search application before scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct AppRange {
    /// Short name used for directories and report rows.
    pub label: String,
    /// Scaling keeps `lo` and shrinks `hi - origin` by the scale factor.
    pub origin: u64,
    pub lo: u64,
    pub hi: u64,
    pub parts: u32,
}

impl AppRange {
    /// Range [3, 2,000,000] in 2059 parts.
    pub fn app1() -> Self {
        AppRange { label: "app1".into(), origin: 0, lo: 3, hi: 2_000_000, parts: 2059 }
    }

    /// Range [2,000,001, 3,000,000] in 1080 parts.
    pub fn app2() -> Self {
        AppRange { label: "app2".into(), origin: 2_000_000, lo: 2_000_001, hi: 3_000_000, parts: 1080 }
    }

    pub fn scaled(&self, scale: f64) -> Result<RangeSpec, HarnessError> {
        let hi = self.origin + ((self.hi - self.origin) as f64 * scale).round() as u64;
        let parts = ((self.parts as f64 * scale).round() as u32).max(1);
        RangeSpec::new(self.lo, hi, parts)
            .map_err(|e| HarnessError::Config(format!("{} at scale {scale}: {e}", self.label)))
    }
}

/// Which applications a node leeches, by index into [`ScenarioConfig::apps`].
#[derive(Debug, Clone, PartialEq)]
pub enum Leech {
    None,
    All,
    Apps(Vec<usize>),
}

impl Leech {
    pub fn wants(&self, app: usize) -> bool {
        match self {
            Leech::None => false,
            Leech::All => true,
            Leech::Apps(a) => a.contains(&app),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub seeds: Vec<usize>,
    pub leech: Leech,
}

impl NodeSpec {
    pub fn new(name: &str, seeds: Vec<usize>, leech: Leech) -> Self {
        NodeSpec { name: name.into(), seeds, leech }
    }

    pub fn leecher(name: &str) -> Self {
        NodeSpec::new(name, vec![], Leech::All)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    I,
    II,
    III,
    IV,
    Custom,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::I => "I",
            ScenarioKind::II => "II",
            ScenarioKind::III => "III",
            ScenarioKind::IV => "IV",
            ScenarioKind::Custom => "custom",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" | "1" => Ok(ScenarioKind::I),
            "II" | "2" => Ok(ScenarioKind::II),
            "III" | "3" => Ok(ScenarioKind::III),
            "IV" | "4" => Ok(ScenarioKind::IV),
            "custom" => Ok(ScenarioKind::Custom),
            other => Err(format!("unknown scenario {other:?}; expected I, II, III or IV")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub apps: Vec<AppRange>,
    pub roster: Vec<NodeSpec>,
    /// In (0, 1]; shrinks every range and part count.
    pub scale: f64,
    pub m_min: u32,
    pub m_max: u32,
    /// Tracker ping period `t`.
    pub ping_interval: Duration,
    /// Missed pings `f` before a host is dropped.
    pub max_misses: u32,
    pub push_interval: Duration,
    pub heartbeat: Duration,
    /// Seconds before a seeder reissues an assigned part.
    pub work_timeout: f64,
    pub cache_app: bool,
    pub baseline: bool,
    /// Run directory; must be empty or absent.
    pub out: PathBuf,
}

impl ScenarioConfig {
    /// Roster and applications of one of the four published scenarios.
    pub fn preset(kind: ScenarioKind, scale: f64, out: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let both = || vec![AppRange::app1(), AppRange::app2()];
        let (apps, roster) = match kind {
            ScenarioKind::I => (
                vec![AppRange::app1()],
                vec![
                    NodeSpec::new("S", vec![0], Leech::None),
                    NodeSpec::leecher("X"),
                    NodeSpec::leecher("Y"),
                ],
            ),
            // Two clients seed one app each and leech the other's; one
            // client leeches both.
            ScenarioKind::II => (
                both(),
                vec![
                    NodeSpec::new("X", vec![0], Leech::Apps(vec![1])),
                    NodeSpec::leecher("Y"),
                    NodeSpec::new("Z", vec![1], Leech::Apps(vec![0])),
                ],
            ),
            // As II, but the seeders also work on their own app.
            ScenarioKind::III => (
                both(),
                vec![NodeSpec::new("X", vec![0], Leech::All), NodeSpec::leecher("Y"), NodeSpec::new("Z", vec![1], Leech::All)],
            ),
            ScenarioKind::IV => (
                both(),
                vec![
                    NodeSpec::new("X", vec![0], Leech::All),
                    NodeSpec::leecher("Y"),
                    NodeSpec::new("Z", vec![1], Leech::All),
                    NodeSpec::leecher("U"),
                    NodeSpec::leecher("V"),
                    NodeSpec::leecher("W"),
                ],
            ),
            ScenarioKind::Custom => return Err(HarnessError::Config("custom scenarios have no preset".into())),
        };
        Ok(ScenarioConfig {
            kind,
            apps,
            roster,
            scale,
            m_min: 1,
            m_max: 1,
            ping_interval: Duration::from_secs(2),
            max_misses: 3,
            push_interval: Duration::from_secs(1),
            heartbeat: Duration::from_secs(1),
            work_timeout: 30.0,
            cache_app: false,
            baseline: false,
            out: out.into(),
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("scale {} is outside (0, 1]", self.scale));
        }
        ValidationPolicy::new(self.m_min, self.m_max).map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.work_timeout.is_finite() && self.work_timeout > 0.0) {
            return bad("work timeout must be positive".into());
        }
        for a in &self.apps {
            if a.label.is_empty() || a.label.contains(char::is_whitespace) {
                return bad(format!("app label {:?} must be a single word", a.label));
            }
            a.scaled(self.scale)?;
        }
        let mut names = std::collections::HashSet::new();
        for n in &self.roster {
            if n.name.is_empty() || n.name.contains(char::is_whitespace) || !names.insert(&n.name) {
                return bad(format!("node name {:?} is empty, not one word or repeated", n.name));
            }
            let refs = n.seeds.iter().chain(match &n.leech {
                Leech::Apps(a) => a.as_slice(),
                _ => &[],
            });
            if let Some(i) = refs.into_iter().find(|&&i| i >= self.apps.len()) {
                return bad(format!("node {} refers to app index {i}", n.name));
            }
        }
        for i in 0..self.apps.len() {
            let seeders = self.roster.iter().filter(|n| n.seeds.contains(&i)).count();
            if seeders != 1 {
                return bad(format!("app {} has {seeders} seeders; exactly one is needed", self.apps[i].label));
            }
        }
        Ok(())
    }

    pub fn seeder_of(&self, app: usize) -> Option<&NodeSpec> {
        self.roster.iter().find(|n| n.seeds.contains(&app))
    }

    pub fn leechers_of(&self, app: usize) -> impl Iterator<Item = &NodeSpec> {
        self.roster.iter().filter(move |n| n.leech.wants(app))
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.roster.iter().find(|n| n.name == name)
    }

    /// Seconds without a newly accepted part before the run is abandoned.
    pub fn watchdog(&self) -> Duration {
        Duration::from_secs_f64(10.0 * self.work_timeout)
    }
}
