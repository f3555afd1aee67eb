//! Measurement units published for every application: data size `d`,
//! popularity `p` and average working time `w`, plus their replicated forms
//! under majority voting and a coarse complexity hint derived from them.
//!
//! Everything here is a pure function over immutable inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    /// `w` is undefined until at least one run has completed.
    #[error("average working time is undefined for an empty run log")]
    UndefinedMetric,
    #[error("invalid validation policy: m_min={m_min}, m_max={m_max} (need 1 <= m_min <= m_max)")]
    InvalidPolicy { m_min: u32, m_max: u32 },
    #[error("invalid complexity thresholds: {0}")]
    InvalidThresholds(&'static str),
}

/// Byte counts of every application-file and data-part transfer for one
/// application.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeAccount {
    pub app_sizes: Vec<u64>,
    pub data_sizes: Vec<u64>,
}

impl SizeAccount {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, app_bytes: Option<u64>, data_bytes: u64) {
        if let Some(app) = app_bytes {
            self.app_sizes.push(app);
        }
        self.data_sizes.push(data_bytes);
    }

    /// Concatenates two accounts.
    pub fn merge(mut self, other: &SizeAccount) -> SizeAccount {
        self.app_sizes.extend_from_slice(&other.app_sizes);
        self.data_sizes.extend_from_slice(&other.data_sizes);
        self
    }
}

/// One completed execution of an application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub node: NodeId,
    pub elapsed: f64,
}

/// Completed executions of one application, in completion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    entries: Vec<RunEntry>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a completion. Negative or non-finite durations are clamped to 0.
    pub fn push(&mut self, node: NodeId, elapsed: f64) {
        let elapsed = if elapsed.is_finite() && elapsed > 0.0 { elapsed } else { 0.0 };
        self.entries.push(RunEntry { node, elapsed });
    }

    pub fn entries(&self) -> &[RunEntry] {
        &self.entries
    }

    pub fn total_elapsed(&self) -> f64 {
        self.entries.iter().map(|e| e.elapsed).sum()
    }
}

impl FromIterator<(NodeId, f64)> for RunLog {
    fn from_iter<I: IntoIterator<Item = (NodeId, f64)>>(iter: I) -> Self {
        let mut log = RunLog::new();
        for (node, elapsed) in iter {
            log.push(node, elapsed);
        }
        log
    }
}

/// Published `(d, p, w)` triple. `w` is absent exactly when `p == 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub d: u64,
    pub p: u64,
    pub w: Option<f64>,
}

impl MetricTriple {
    pub fn from_parts(acc: &SizeAccount, log: &RunLog) -> MetricTriple {
        MetricTriple {
            d: data_size(acc),
            p: popularity(log),
            w: avg_working_time(log).ok(),
        }
    }
}

/// Running sums from which a [`MetricTriple`] is derived without keeping
/// every transfer and run around. Sent on the wire in status updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkTotals {
    pub app_bytes: u64,
    pub data_bytes: u64,
    pub runs: u64,
    pub seconds: f64,
}

impl WorkTotals {
    pub fn record(&mut self, app_bytes: u64, data_bytes: u64, elapsed: f64) {
        self.app_bytes += app_bytes;
        self.data_bytes += data_bytes;
        self.runs += 1;
        if elapsed.is_finite() && elapsed > 0.0 {
            self.seconds += elapsed;
        }
    }

    pub fn triple(&self) -> MetricTriple {
        MetricTriple {
            d: self.app_bytes + self.data_bytes,
            p: self.runs,
            w: (self.runs > 0).then(|| self.seconds / self.runs as f64),
        }
    }
}

/// Replication bounds for majority voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct ValidationPolicy {
    m_min: u32,
    m_max: u32,
}

impl ValidationPolicy {
    pub fn new(m_min: u32, m_max: u32) -> Result<Self, MetricsError> {
        if m_min == 0 || m_min > m_max {
            return Err(MetricsError::InvalidPolicy { m_min, m_max });
        }
        Ok(Self { m_min, m_max })
    }

    /// A single run per part, no voting.
    pub fn single() -> Self {
        Self { m_min: 1, m_max: 1 }
    }

    pub fn m_min(&self) -> u32 {
        self.m_min
    }

    pub fn m_max(&self) -> u32 {
        self.m_max
    }

    pub fn is_valid(&self) -> bool {
        self.m_min >= 1 && self.m_min <= self.m_max
    }
}

#[derive(Deserialize)]
struct RawPolicy {
    m_min: u32,
    m_max: u32,
}

impl TryFrom<RawPolicy> for ValidationPolicy {
    type Error = MetricsError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        ValidationPolicy::new(raw.m_min, raw.m_max)
    }
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        Self::single()
    }
}

/// Total bytes moved for an application: every application-file transfer
/// plus every data-part transfer.
pub fn data_size(acc: &SizeAccount) -> u64 {
    acc.app_sizes.iter().sum::<u64>() + acc.data_sizes.iter().sum::<u64>()
}

/// Number of completed runs (not distinct nodes).
pub fn popularity(log: &RunLog) -> u64 {
    log.entries.len() as u64
}

pub fn avg_working_time(log: &RunLog) -> Result<f64, MetricsError> {
    let p = popularity(log);
    if p == 0 {
        return Err(MetricsError::UndefinedMetric);
    }
    Ok(log.total_elapsed() / p as f64)
}

/// Scales every unit by `m_min`, the number of redundant runs needed before a
/// part can be accepted. `w` is multiplied as well, exactly as `d` and `p` are.
pub fn replicated_metrics(base: MetricTriple, policy: ValidationPolicy) -> MetricTriple {
    let k = policy.m_min() as u64;
    MetricTriple {
        d: base.d * k,
        p: base.p * k,
        w: base.w.map(|w| w * k as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Complexity {
    Low,
    High,
    Indeterminate,
}

/// Cut-offs for [`complexity_hint`]. Sizes in bytes, times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityThresholds {
    pub d_hi: u64,
    pub d_lo: u64,
    pub w_lo: f64,
    pub w_hi: f64,
    pub p_hi: u64,
}

impl Default for ComplexityThresholds {
    fn default() -> Self {
        Self {
            d_hi: 5_000_000,
            d_lo: 64_000,
            w_lo: 5.0,
            w_hi: 60.0,
            p_hi: 100,
        }
    }
}

impl ComplexityThresholds {
    /// Low bounds must sit strictly below high bounds, otherwise one triple
    /// could satisfy both rules.
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.d_lo >= self.d_hi {
            return Err(MetricsError::InvalidThresholds("d_lo must be < d_hi"));
        }
        if !(self.w_lo < self.w_hi) {
            return Err(MetricsError::InvalidThresholds("w_lo must be < w_hi"));
        }
        Ok(())
    }
}

/// Large data with short runs suggests a cheap application; many long runs
/// over little data suggest an expensive one.
pub fn complexity_hint(m: &MetricTriple, th: &ComplexityThresholds) -> Complexity {
    let Some(w) = m.w else {
        return Complexity::Indeterminate;
    };
    if m.d >= th.d_hi && w <= th.w_lo {
        Complexity::Low
    } else if m.p >= th.p_hi && w >= th.w_hi && m.d <= th.d_lo {
        Complexity::High
    } else {
        Complexity::Indeterminate
    }
}
