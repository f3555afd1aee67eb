//! Seeder role: hands out parts of the agent's own apps, validates and votes
//! on returned results, and keeps the app's work totals.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, MutexGuard};

use log::{info, warn};
use vc_core::events::{now_epoch, EventLog, EventRecord};
use vc_core::metrics::{ValidationPolicy, WorkTotals};
use vc_core::protocol::{codes, AppId, AppStatus, Body, NodeId, Payload};
use vc_core::workloads::{check_payload, decode_data_part, WorkUnit};

use crate::assign::AssignmentMap;
use crate::store::{read_tracker_log, SeedStore, TrackerLine};
use crate::vote::{eval, ResultRecord, Verdict, VoteState};
use crate::AgentError;

/// Fallback work timeout while an app has no published w.
pub const DEFAULT_WORK_TIMEOUT: f64 = 300.0;
const MIN_WORK_TIMEOUT: f64 = 1.0;

/// Optional extra check on a result before it may vote.
pub trait ResultHook: Send + Sync {
    /// `Ok(true)` keeps the record.
    fn check(&self, unit: &WorkUnit, payload: &[u8]) -> Result<bool, String>;
}

impl<F> ResultHook for F
where
    F: Fn(&WorkUnit, &[u8]) -> Result<bool, String> + Send + Sync,
{
    fn check(&self, unit: &WorkUnit, payload: &[u8]) -> Result<bool, String> {
        self(unit, payload)
    }
}

/// `sh -c CMD` with the payload on stdin and `VC_PART`, `VC_LO`, `VC_HI`
/// set. Exit 0 keeps the record, 1 discards it, anything else is a failure.
#[derive(Debug, Clone)]
pub struct ExecResultHook {
    pub command: String,
}

impl ResultHook for ExecResultHook {
    fn check(&self, unit: &WorkUnit, payload: &[u8]) -> Result<bool, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .env("VC_PART", unit.index.to_string())
            .env("VC_LO", unit.lo.to_string())
            .env("VC_HI", unit.hi.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(payload);
        }
        match child.wait().map_err(|e| e.to_string())?.code() {
            Some(0) => Ok(true),
            Some(1) => Ok(false),
            other => Err(format!("exit status {other:?}")),
        }
    }
}

#[derive(Clone)]
pub struct SeedConfig {
    pub policy: ValidationPolicy,
    /// Fixed work timeout in seconds; derived from w when unset.
    pub work_timeout: Option<f64>,
    pub hook: Option<Arc<dyn ResultHook>>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { policy: ValidationPolicy::single(), work_timeout: None, hook: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SeedCounters {
    pub assigned: u64,
    pub reissued: u64,
    pub rejected: u64,
    pub exhausted: u64,
}

struct SeedApp {
    id: AppId,
    app_bytes: Arc<Vec<u8>>,
    units: Vec<WorkUnit>,
    votes: Vec<VoteState>,
    assignments: AssignmentMap,
    totals: WorkTotals,
    accepted: usize,
    counters: SeedCounters,
}

/// Reply to a RESULT_SUBMIT plus whether the app's status changed.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmitOutcome {
    pub reply: Body,
    pub accepted: bool,
}

pub struct Seeder {
    me: NodeId,
    store: SeedStore,
    cfg: SeedConfig,
    events: Option<Arc<EventLog>>,
    apps: BTreeMap<AppId, Mutex<SeedApp>>,
}

fn units_from_store(store: &SeedStore, app: &AppId) -> Result<Vec<WorkUnit>, AgentError> {
    let parts = store.parts(app)?;
    let mut units = Vec::with_capacity(parts.len());
    for (expected, index) in parts.into_iter().enumerate() {
        if index as usize != expected {
            return Err(AgentError::Store(format!("app {}: data part {expected} missing", app.short())));
        }
        let numbers = decode_data_part(&store.read_part(app, index)?)
            .map_err(|e| AgentError::Store(format!("app {} part {index}: {e}", app.short())))?;
        let (Some(&lo), Some(&hi)) = (numbers.first(), numbers.last()) else {
            return Err(AgentError::Store(format!("app {} part {index} is empty", app.short())));
        };
        units.push(WorkUnit { index, lo: lo as u64, hi: hi as u64 });
    }
    Ok(units)
}

impl Seeder {
    /// Installs (or reopens) every seeded app under `data_dir/Seed`.
    pub fn open(
        me: NodeId,
        data_dir: &Path,
        apps: &[(Vec<u8>, Vec<WorkUnit>)],
        cfg: SeedConfig,
        events: Option<Arc<EventLog>>,
    ) -> Result<Seeder, AgentError> {
        let store = SeedStore::new(data_dir);
        let mut map = BTreeMap::new();
        for (app_bytes, units) in apps {
            let id = store.install(app_bytes, units)?;
            let units = units_from_store(&store, &id)?;
            let mut votes = vec![VoteState::default(); units.len()];
            let mut accepted = 0;
            for part in store.accepted_parts(&id)? {
                if let Some(v) = votes.get_mut(part as usize) {
                    v.accepted = Some(store.read_result(&id, part)?);
                    accepted += 1;
                }
            }
            let mut totals = WorkTotals::default();
            for (_, line) in read_tracker_log(&store.tracker_log_path(&id))? {
                if let TrackerLine::Accept { bytes, app_bytes, seconds, .. } = line {
                    totals.record(app_bytes, bytes.saturating_sub(app_bytes), seconds);
                }
            }
            info!("seeding app {} with {} parts, {accepted} already accepted", id.short(), units.len());
            map.insert(
                id,
                Mutex::new(SeedApp {
                    id,
                    app_bytes: Arc::new(app_bytes.clone()),
                    units,
                    votes,
                    assignments: AssignmentMap::default(),
                    totals,
                    accepted,
                    counters: SeedCounters::default(),
                }),
            );
        }
        Ok(Seeder { me, store, cfg, events, apps: map })
    }

    pub fn store(&self) -> &SeedStore {
        &self.store
    }

    pub fn app_ids(&self) -> Vec<AppId> {
        self.apps.keys().copied().collect()
    }

    pub fn serves(&self, app: &AppId) -> bool {
        self.apps.contains_key(app)
    }

    fn lock(&self, app: &AppId) -> Option<MutexGuard<'_, SeedApp>> {
        self.apps.get(app).map(|m| m.lock().unwrap_or_else(|e| e.into_inner()))
    }

    fn emit(&self, rec: EventRecord) {
        if let Some(ev) = &self.events {
            ev.emit(rec);
        }
    }

    fn log(&self, app: &AppId, line: TrackerLine) {
        if let Err(e) = self.store.log_tracker(app, &line.render(now_epoch())) {
            warn!("tracker log for {}: {e}", app.short());
        }
    }

    fn work_timeout(&self, totals: &WorkTotals) -> f64 {
        self.cfg.work_timeout.unwrap_or_else(|| {
            totals.triple().w.map_or(DEFAULT_WORK_TIMEOUT, |w| (10.0 * w).max(MIN_WORK_TIMEOUT))
        })
    }

    fn status_of(&self, a: &SeedApp) -> AppStatus {
        AppStatus {
            app: a.id,
            part_count: a.units.len() as u32,
            parts_remaining: (a.units.len() - a.accepted) as u32,
            policy: self.cfg.policy,
            work: a.totals,
        }
    }

    /// Current status of every seeded app, for OFFER and STATUS_UPDATE.
    pub fn statuses(&self) -> Vec<AppStatus> {
        self.apps.keys().filter_map(|id| self.lock(id).map(|a| self.status_of(&a))).collect()
    }

    pub fn counters(&self, app: &AppId) -> Option<SeedCounters> {
        self.lock(app).map(|a| a.counters)
    }

    pub fn is_complete(&self, app: &AppId) -> bool {
        self.lock(app).is_some_and(|a| a.accepted == a.units.len())
    }

    /// Accepted payload of a part, if any.
    pub fn accepted_payload(&self, app: &AppId, part: u32) -> Option<Vec<u8>> {
        self.lock(app)?.votes.get(part as usize)?.accepted.clone()
    }

    /// DIST: answers a WORK_REQUEST with APP_PAYLOAD (when asked for) and
    /// DATA_PAYLOAD, or a single ERROR.
    pub fn dist(&self, requester: NodeId, app: &AppId, want_app: bool, retry: Option<u32>) -> Vec<Body> {
        let Some(mut a) = self.lock(app) else {
            return vec![Body::error(codes::UNKNOWN_APP, format!("app {} is not seeded here", app.short()))];
        };
        if a.accepted == a.units.len() {
            return vec![Body::error(codes::APP_COMPLETE, "all parts accepted")];
        }
        let now = now_epoch();
        let timeout = self.work_timeout(&a.totals);
        let policy = self.cfg.policy;
        let open = |a: &SeedApp, i: usize| {
            let v = &a.votes[i];
            !v.has_voted(&requester) && a.assignments.assignees(i as u32).len() < v.wanted(policy)
        };
        let mut chosen = retry.filter(|&p| {
            (p as usize) < a.units.len()
                && (a.assignments.holds(p, &requester) || open(&a, p as usize))
                && a.votes[p as usize].accepted.is_none()
        });
        if chosen.is_none() {
            // A fresh request means earlier holdings were abandoned.
            for p in a.assignments.held_by(&requester) {
                a.assignments.release(p, &requester);
            }
            chosen = (0..a.units.len()).find(|&i| open(&a, i)).map(|i| i as u32);
        }
        let Some(part) = chosen else {
            return vec![Body::error(codes::NO_WORK, "every open part is assigned")];
        };
        let assignment = a.assignments.assign(part, requester, now, timeout);
        a.counters.assigned += 1;
        self.log(app, TrackerLine::Assign { part, node: requester.to_string(), deadline: assignment.deadline });
        self.emit(EventRecord::new(self.me, "assign").app(app).part(part).peer(requester));
        let app_bytes = Arc::clone(&a.app_bytes);
        drop(a);
        let data = match self.store.read_part(app, part) {
            Ok(d) => d,
            Err(e) => {
                warn!("reading part {part} of {}: {e}", app.short());
                if let Some(mut a) = self.lock(app) {
                    a.assignments.release(part, &requester);
                }
                return vec![Body::error(codes::UNEXPECTED, "data part unavailable")];
            }
        };
        let mut out = Vec::with_capacity(2);
        if want_app {
            out.push(Body::AppPayload { app: *app, payload: Payload(app_bytes.to_vec()) });
        }
        out.push(Body::DataPayload { app: *app, part, deadline: assignment.deadline, payload: Payload(data) });
        out
    }

    fn reject(&self, a: &mut SeedApp, part: u32, node: NodeId, reason: &str) -> Body {
        a.counters.rejected += 1;
        self.log(&a.id, TrackerLine::Reject { part, node: node.to_string(), reason: reason.to_string() });
        self.emit(EventRecord::new(self.me, "reject").app(a.id).part(part).peer(node));
        Body::ResultReject { app: a.id, part, reason: reason.to_string() }
    }

    /// VAL then EVAL for one RESULT_SUBMIT.
    pub fn submit(&self, sender: NodeId, app: &AppId, part: u32, payload: &[u8], reported_d: u64, app_bytes: u64, reported_w: f64) -> SubmitOutcome {
        let Some(mut guard) = self.lock(app) else {
            let reply = Body::error(codes::UNKNOWN_APP, format!("app {} is not seeded here", app.short()));
            return SubmitOutcome { reply, accepted: false };
        };
        let a = &mut *guard;
        let rejected = |reply| SubmitOutcome { reply, accepted: false };
        let Some(unit) = a.units.get(part as usize).copied() else {
            return rejected(self.reject(a, part, sender, "part out of range"));
        };
        if a.votes[part as usize].accepted.is_some() {
            a.assignments.release(part, &sender);
            return rejected(self.reject(a, part, sender, "already accepted"));
        }
        if a.votes[part as usize].has_voted(&sender) {
            return rejected(self.reject(a, part, sender, "duplicate vote"));
        }
        if !(reported_w.is_finite() && reported_w >= 0.0) || app_bytes > reported_d {
            a.assignments.release(part, &sender);
            return rejected(self.reject(a, part, sender, "invalid metrics"));
        }
        if let Err(e) = check_payload(&unit, payload) {
            a.assignments.release(part, &sender);
            return rejected(self.reject(a, part, sender, &format!("invalid result: {e}")));
        }
        if let Some(hook) = &self.cfg.hook {
            let keep = hook.check(&unit, payload).unwrap_or_else(|e| {
                warn!("result hook failed for part {part}: {e}");
                false
            });
            if !keep {
                a.assignments.release(part, &sender);
                return rejected(self.reject(a, part, sender, "result hook rejected"));
            }
        }
        a.assignments.release(part, &sender);
        let vote = &mut a.votes[part as usize];
        vote.records.push(ResultRecord {
            part,
            payload: payload.to_vec(),
            reported_d,
            app_bytes,
            reported_w,
            submitter: sender,
        });
        let ack = Body::ResultAck { app: *app, part };
        match eval(&vote.records, self.cfg.policy) {
            Verdict::Pending => SubmitOutcome { reply: ack, accepted: false },
            Verdict::Exhausted => {
                vote.records.clear();
                a.counters.exhausted += 1;
                self.log(app, TrackerLine::Exhausted { part });
                self.emit(EventRecord::new(self.me, "exhausted").app(app).part(part));
                SubmitOutcome { reply: ack, accepted: false }
            }
            Verdict::Accepted { payload, agreeing } => {
                let records = std::mem::take(&mut vote.records);
                vote.accepted = Some(payload.clone());
                a.assignments.clear_part(part);
                a.accepted += 1;
                if let Err(e) = self.store.save_result(app, part, &payload) {
                    warn!("saving result {part} of {}: {e}", app.short());
                }
                let rep = &records[agreeing[0]];
                a.totals.record(rep.app_bytes, rep.reported_d - rep.app_bytes, rep.reported_w);
                self.log(
                    app,
                    TrackerLine::Accept {
                        part,
                        node: rep.submitter.to_string(),
                        bytes: rep.reported_d,
                        app_bytes: rep.app_bytes,
                        seconds: rep.reported_w,
                    },
                );
                self.emit(
                    EventRecord::new(self.me, "accept")
                        .app(app)
                        .part(part)
                        .peer(rep.submitter)
                        .bytes(rep.reported_d)
                        .seconds(rep.reported_w),
                );
                for (i, r) in records.iter().enumerate() {
                    if !agreeing.contains(&i) {
                        self.reject(a, part, r.submitter, "minority vote");
                    }
                }
                if a.accepted == a.units.len() {
                    info!("app {} complete", app.short());
                    self.emit(EventRecord::new(self.me, "complete").app(app));
                }
                SubmitOutcome { reply: ack, accepted: true }
            }
        }
    }

    /// TAIL over every app: expired assignments are dropped so their parts
    /// can be handed out again. Returns how many were reissued.
    pub fn tail(&self, now: f64) -> usize {
        let mut n = 0;
        for id in self.apps.keys() {
            let Some(mut a) = self.lock(id) else { continue };
            for (part, assignment) in a.assignments.tail(now) {
                a.counters.reissued += 1;
                n += 1;
                self.log(id, TrackerLine::Reissue { part, node: assignment.node.to_string() });
                self.emit(EventRecord::new(self.me, "reissue").app(id).part(part).peer(assignment.node));
            }
        }
        n
    }
}
