//! The applications list and the host table behind it, plus the pure
//! state transitions applied by the synchronizer.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vc_core::metrics::replicated_metrics;
use vc_core::protocol::{AppAnnouncement, AppId, AppStatus, NodeId};

use crate::TrackerError;

/// Status-update period `t` and the number `f` of consecutive missed
/// periods after which a host and its applications are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LivenessPolicy {
    t: Duration,
    f: u32,
}

impl LivenessPolicy {
    pub fn new(t: Duration, f: u32) -> Result<Self, TrackerError> {
        if t.is_zero() || f == 0 {
            return Err(TrackerError::Config(format!(
                "liveness needs t > 0 and f >= 1 (t={t:?}, f={f})"
            )));
        }
        Ok(Self { t, f })
    }

    pub fn period(&self) -> Duration {
        self.t
    }

    pub fn max_misses(&self) -> u32 {
        self.f
    }

    /// How long a single PING waits for its PONG.
    pub fn ping_timeout(&self) -> Duration {
        (self.t / 2).min(Duration::from_secs(2))
    }
}

impl Default for LivenessPolicy {
    fn default() -> Self {
        Self { t: Duration::from_secs(60), f: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostRecord {
    pub node: NodeId,
    pub address: String,
    pub last_seen: f64,
    pub consecutive_misses: u32,
    pub blocked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppEntry {
    pub announcement: AppAnnouncement,
    pub registered_at: f64,
    pub last_update: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplicationsList {
    pub revision: u64,
    #[serde(with = "entry_vec")]
    entries: BTreeMap<(NodeId, AppId), AppEntry>,
}

mod entry_vec {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(NodeId, AppId), AppEntry>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(NodeId, AppId), AppEntry>, D::Error> {
        let v: Vec<AppEntry> = Vec::deserialize(d)?;
        Ok(v.into_iter()
            .map(|e| ((e.announcement.host, e.announcement.app), e))
            .collect())
    }
}

impl ApplicationsList {
    pub fn entries(&self) -> impl Iterator<Item = &AppEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, host: &NodeId, app: &AppId) -> Option<&AppEntry> {
        self.entries.get(&(*host, *app))
    }

    pub fn apps_of<'a>(&'a self, host: &'a NodeId) -> impl Iterator<Item = &'a AppEntry> + 'a {
        self.entries.values().filter(move |e| e.announcement.host == *host)
    }

    pub fn announcements(&self) -> Vec<AppAnnouncement> {
        self.entries.values().map(|e| e.announcement.clone()).collect()
    }
}

/// Everything the synchronizer owns: the published list and the host table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub list: ApplicationsList,
    #[serde(with = "host_vec")]
    pub hosts: BTreeMap<NodeId, HostRecord>,
}

mod host_vec {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<NodeId, HostRecord>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<NodeId, HostRecord>, D::Error> {
        let v: Vec<HostRecord> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|h| (h.node, h)).collect())
    }
}

/// One requested modification of the tracker state.
#[derive(Debug, Clone, PartialEq)]
pub enum Change {
    /// A volunteer introduced itself (HELLO / OFFER).
    RegisterHost { node: NodeId, address: String },
    /// The host answered a PING or sent an accepted message.
    Refresh { node: NodeId },
    /// The host missed a PING round; removal once `limit` is reached.
    Miss { node: NodeId, limit: u32 },
    UpsertApps { node: NodeId, apps: Vec<AppStatus> },
    DropApp { node: NodeId, app: AppId },
    RemoveHost { node: NodeId },
    BlockHost { node: NodeId },
}

impl Change {
    pub fn node(&self) -> NodeId {
        match self {
            Change::RegisterHost { node, .. }
            | Change::Refresh { node }
            | Change::Miss { node, .. }
            | Change::UpsertApps { node, .. }
            | Change::DropApp { node, .. }
            | Change::RemoveHost { node }
            | Change::BlockHost { node } => *node,
        }
    }
}

/// Observable consequences of applying a change, for logging.
#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    HostAdded(NodeId),
    HostExpired(NodeId),
    HostBlocked(NodeId),
    AppAdded(NodeId, AppId),
    AppDropped(NodeId, AppId),
}

#[derive(Debug, Default)]
pub struct ApplyOutcome {
    /// Published entries changed; the revision must advance.
    pub entries_changed: bool,
    /// Host set membership or flags changed; worth persisting.
    pub hosts_changed: bool,
    pub transitions: Vec<Transition>,
}

impl ApplyOutcome {
    fn merge(&mut self, other: ApplyOutcome) {
        self.entries_changed |= other.entries_changed;
        self.hosts_changed |= other.hosts_changed;
        self.transitions.extend(other.transitions);
    }
}

impl TrackerState {
    /// Applies a batch in order; does not touch the revision.
    pub fn apply_batch(&mut self, batch: &[Change], now: f64) -> ApplyOutcome {
        let mut out = ApplyOutcome::default();
        for change in batch {
            out.merge(self.apply(change, now));
        }
        out
    }

    pub fn apply(&mut self, change: &Change, now: f64) -> ApplyOutcome {
        let mut out = ApplyOutcome::default();
        match change {
            Change::RegisterHost { node, address } => match self.hosts.get_mut(node) {
                Some(h) if h.blocked => {}
                Some(h) => {
                    if h.address != *address {
                        h.address = address.clone();
                        out.hosts_changed = true;
                        for e in self.list.entries.values_mut().filter(|e| e.announcement.host == *node) {
                            e.announcement.address = address.clone();
                            out.entries_changed = true;
                        }
                    }
                    h.last_seen = now;
                    h.consecutive_misses = 0;
                }
                None => {
                    self.hosts.insert(
                        *node,
                        HostRecord {
                            node: *node,
                            address: address.clone(),
                            last_seen: now,
                            consecutive_misses: 0,
                            blocked: false,
                        },
                    );
                    out.hosts_changed = true;
                    out.transitions.push(Transition::HostAdded(*node));
                }
            },
            Change::Refresh { node } => {
                if let Some(h) = self.hosts.get_mut(node).filter(|h| !h.blocked) {
                    h.last_seen = now;
                    h.consecutive_misses = 0;
                    for e in self.list.entries.values_mut().filter(|e| e.announcement.host == *node) {
                        e.last_update = now;
                    }
                }
            }
            Change::Miss { node, limit } => {
                let expired = match self.hosts.get_mut(node).filter(|h| !h.blocked) {
                    Some(h) if h.consecutive_misses + 1 >= *limit => true,
                    Some(h) => {
                        h.consecutive_misses += 1;
                        false
                    }
                    None => false,
                };
                if expired {
                    out.merge(self.remove_host(node));
                }
            }
            Change::UpsertApps { node, apps } => {
                let Some(host) = self.hosts.get(node).filter(|h| !h.blocked) else {
                    return out;
                };
                let address = host.address.clone();
                for status in apps.iter().filter(|s| s.parts_remaining <= s.part_count) {
                    let announcement = AppAnnouncement {
                        app: status.app,
                        host: *node,
                        address: address.clone(),
                        metrics: replicated_metrics(status.work.triple(), status.policy),
                        part_count: status.part_count,
                        parts_remaining: status.parts_remaining,
                        policy: status.policy,
                        work: status.work,
                    };
                    match self.list.entries.get_mut(&(*node, status.app)) {
                        Some(e) => {
                            if e.announcement != announcement {
                                e.announcement = announcement;
                                out.entries_changed = true;
                            }
                            e.last_update = now.max(e.registered_at);
                        }
                        None => {
                            self.list.entries.insert(
                                (*node, status.app),
                                AppEntry { announcement, registered_at: now, last_update: now },
                            );
                            out.entries_changed = true;
                            out.transitions.push(Transition::AppAdded(*node, status.app));
                        }
                    }
                }
                if let Some(h) = self.hosts.get_mut(node) {
                    h.last_seen = now;
                    h.consecutive_misses = 0;
                }
            }
            Change::DropApp { node, app } => {
                if self.list.entries.remove(&(*node, *app)).is_some() {
                    out.entries_changed = true;
                    out.transitions.push(Transition::AppDropped(*node, *app));
                }
            }
            Change::RemoveHost { node } => out.merge(self.remove_host(node)),
            Change::BlockHost { node } => {
                out.merge(self.drop_entries_of(node));
                let h = self.hosts.entry(*node).or_insert_with(|| HostRecord {
                    node: *node,
                    address: String::new(),
                    last_seen: now,
                    consecutive_misses: 0,
                    blocked: false,
                });
                if !h.blocked {
                    h.blocked = true;
                    h.consecutive_misses = 0;
                    out.hosts_changed = true;
                    out.transitions.push(Transition::HostBlocked(*node));
                }
            }
        }
        out
    }

    fn drop_entries_of(&mut self, node: &NodeId) -> ApplyOutcome {
        let mut out = ApplyOutcome::default();
        let keys: Vec<_> = self.list.entries.keys().filter(|(h, _)| h == node).copied().collect();
        for key in keys {
            self.list.entries.remove(&key);
            out.entries_changed = true;
            out.transitions.push(Transition::AppDropped(key.0, key.1));
        }
        out
    }

    fn remove_host(&mut self, node: &NodeId) -> ApplyOutcome {
        let mut out = self.drop_entries_of(node);
        if self.hosts.remove(node).is_some() {
            out.hosts_changed = true;
            out.transitions.push(Transition::HostExpired(*node));
        }
        out
    }

    /// Non-blocked hosts, the recipients of PING and LIST_PUSH.
    pub fn live_hosts(&self) -> impl Iterator<Item = &HostRecord> {
        self.hosts.values().filter(|h| !h.blocked)
    }

    pub fn is_blocked(&self, node: &NodeId) -> bool {
        self.hosts.get(node).is_some_and(|h| h.blocked)
    }

    /// Every entry refers to a known, non-blocked host.
    pub fn is_consistent(&self) -> bool {
        self.list.entries.iter().all(|((host, app), e)| {
            e.announcement.host == *host
                && e.announcement.app == *app
                && e.last_update >= e.registered_at
                && self.hosts.get(host).is_some_and(|h| !h.blocked)
        })
    }
}
