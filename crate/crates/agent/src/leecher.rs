//! Leecher role: one worker per foreign app fetches a part, runs it, and
//! returns the result with its (d, w).

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use vc_core::events::{now_epoch, EventLog, EventRecord};
use vc_core::protocol::{codes, AppAnnouncement, AppId, Body, Message, NodeId, Payload, ProtocolError};

use crate::net;
use crate::runner::{RunError, Runner};
use crate::store::{CycleStatus, LeechStore, TimeEntry};

#[derive(Debug, Clone)]
pub struct LeechConfig {
    /// Keep the app file between cycles instead of downloading it each time.
    pub cache_app: bool,
    /// Re-requests of a part whose run failed.
    pub max_retries: u32,
    pub request_timeout: Duration,
    /// Pause after NO_WORK or a failed exchange.
    pub backoff: Duration,
    /// Submission attempts before a result is given up.
    pub send_attempts: u32,
}

impl Default for LeechConfig {
    fn default() -> Self {
        LeechConfig {
            cache_app: false,
            max_retries: 2,
            request_timeout: Duration::from_secs(10),
            backoff: Duration::from_millis(200),
            send_attempts: 5,
        }
    }
}

/// Cancellation flag and filesystem lock shared by a worker and STOP.
/// Every write under `Leech/<AppId>` happens with the lock held and the flag
/// clear, so a stopped app's directory is never recreated.
#[derive(Debug, Default)]
pub struct AppControl {
    cancel: AtomicBool,
    fs: Mutex<()>,
}

impl AppControl {
    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    pub fn flag(&self) -> &AtomicBool {
        &self.cancel
    }

    fn guard(&self) -> Option<MutexGuard<'_, ()>> {
        let g = self.fs.lock().unwrap_or_else(|e| e.into_inner());
        (!self.cancelled()).then_some(g)
    }
}

/// STOP: cancels any in-flight run and removes the app subtree. Idempotent.
pub fn stop(ctl: &AppControl, store: &LeechStore, app: &AppId) {
    ctl.cancel.store(true, Ordering::SeqCst);
    let _g = ctl.fs.lock().unwrap_or_else(|e| e.into_inner());
    if let Err(e) = store.remove(app) {
        warn!("removing leech dir of {}: {e}", app.short());
    }
}

/// Why a worker ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerExit {
    /// Seeder reports every part accepted.
    Complete,
    /// Host gone or app dropped.
    Stopped,
    Cancelled,
}

/// Fresh applications list, or `None` when the tracker is unreachable.
pub type ListSource = Arc<dyn Fn() -> Option<Vec<AppAnnouncement>> + Send + Sync>;

pub struct Worker {
    pub me: NodeId,
    pub announcement: AppAnnouncement,
    pub store: LeechStore,
    pub runner: Arc<dyn Runner>,
    pub cfg: LeechConfig,
    pub events: Option<Arc<EventLog>>,
    pub ctl: Arc<AppControl>,
    pub refresh: ListSource,
}

/// A fetched part ready to run.
#[derive(Debug)]
pub struct WorkItem {
    pub part: u32,
    /// App bytes received this cycle (0 when the cached copy is used).
    pub app_received: u64,
    pub data_received: u64,
}

enum Fetch {
    Item(WorkItem),
    Wait,
    Retry(Option<u32>),
    Exit(WorkerExit),
}

enum Sent {
    Ack,
    Rejected,
    Exit(WorkerExit),
    GaveUp,
}

impl Worker {
    fn app(&self) -> AppId {
        self.announcement.app
    }

    fn emit(&self, rec: EventRecord) {
        if let Some(ev) = &self.events {
            ev.emit(rec.app(self.app()).peer(self.announcement.host));
        }
    }

    fn host(&self) -> &str {
        &self.announcement.address
    }

    fn sleep(&self, d: Duration) -> bool {
        let step = Duration::from_millis(20);
        let mut left = d;
        while !left.is_zero() {
            if self.ctl.cancelled() {
                return false;
            }
            let s = left.min(step);
            thread::sleep(s);
            left -= s;
        }
        !self.ctl.cancelled()
    }

    /// STAT on the leecher side: whether the host still lists this app.
    /// `None` when the tracker cannot be asked.
    fn host_listed(&self) -> Option<bool> {
        let list = (self.refresh)()?;
        Some(list.iter().any(|a| a.app == self.app() && a.host == self.announcement.host))
    }

    fn stop_here(&self, why: &str) -> WorkerExit {
        info!("stopping {}: {why}", self.app().short());
        stop(&self.ctl, &self.store, &self.app());
        self.emit(EventRecord::new(self.me, "stop"));
        WorkerExit::Stopped
    }

    /// Handles a failed exchange with the host.
    fn after_failure(&self, e: &ProtocolError) -> Option<WorkerExit> {
        debug!("exchange with {} failed: {e}", self.host());
        if self.host_listed() == Some(false) {
            return Some(self.stop_here("host no longer listed"));
        }
        None
    }

    /// REQ: asks the host for a part and stores the payloads.
    pub fn req(&self, retry: Option<u32>) -> Result<Option<WorkItem>, WorkerExit> {
        match self.fetch(retry) {
            Fetch::Item(item) => Ok(Some(item)),
            Fetch::Exit(e) => Err(e),
            _ => Ok(None),
        }
    }

    fn fetch(&self, retry: Option<u32>) -> Fetch {
        let app = self.app();
        let want_app = !(self.cfg.cache_app && self.store.has_app(&app));
        let msg = Message::new(self.me, Body::WorkRequest { app, want_app, part: retry });
        let replies = match net::request(self.host(), &msg, self.cfg.request_timeout, 2) {
            Ok(r) => r,
            Err(e) => {
                return match self.after_failure(&e) {
                    Some(exit) => Fetch::Exit(exit),
                    None => Fetch::Wait,
                }
            }
        };
        let mut app_bytes = None;
        let mut data = None;
        for m in replies {
            match m.body {
                Body::AppPayload { app: a, payload } if a == app => app_bytes = Some(payload.0),
                Body::DataPayload { app: a, part, payload, .. } if a == app => data = Some((part, payload.0)),
                Body::Error { code, detail } => {
                    return match code.as_str() {
                        codes::APP_COMPLETE => Fetch::Exit(WorkerExit::Complete),
                        codes::NO_WORK => Fetch::Wait,
                        codes::UNKNOWN_APP => Fetch::Exit(self.stop_here("host does not serve the app")),
                        _ => {
                            warn!("work request for {} refused: {code} {detail}", app.short());
                            Fetch::Wait
                        }
                    }
                }
                other => debug!("ignoring {} in work reply", other.kind()),
            }
        }
        let Some((part, data)) = data else { return Fetch::Wait };
        let wire = data.len() as u64 + app_bytes.as_ref().map_or(0, |a| a.len() as u64);
        self.emit(EventRecord::new(self.me, "recv").part(part).bytes(wire));
        match &app_bytes {
            Some(bytes) if !app.matches(bytes) => {
                warn!("app payload for {} failed its hash check; discarded", app.short());
                self.emit(EventRecord::new(self.me, "tampered").part(part));
                return Fetch::Retry(Some(part));
            }
            None if want_app => return Fetch::Retry(Some(part)),
            _ => {}
        }
        let Some(_g) = self.ctl.guard() else { return Fetch::Exit(WorkerExit::Cancelled) };
        let saved = app_bytes
            .as_ref()
            .map_or(Ok(()), |b| self.store.save_app(&app, b))
            .and_then(|_| self.store.save_part(&app, part, &data));
        if let Err(e) = saved {
            warn!("storing part {part} of {}: {e}", app.short());
            return Fetch::Retry(None);
        }
        Fetch::Item(WorkItem {
            part,
            app_received: app_bytes.map_or(0, |b| b.len() as u64),
            data_received: data.len() as u64,
        })
    }

    /// SCAN: bytes of app and data that this cycle brought in, from the
    /// stored files.
    pub fn scan(&self, item: &WorkItem) -> std::io::Result<u64> {
        let app = self.app();
        let data = std::fs::metadata(self.store.part_path(&app, item.part))?.len();
        let app_len = if item.app_received > 0 { std::fs::metadata(self.store.app_path(&app))?.len() } else { 0 };
        Ok(app_len + data)
    }

    /// RUN bracketed by TIME marks; the Time log gets one line either way.
    pub fn run(&self, item: &WorkItem) -> Result<(Vec<u8>, f64), RunError> {
        let app = self.app();
        let begin = now_epoch();
        let out = self.runner.run(&self.store.app_path(&app), &self.store.part_path(&app, item.part), self.ctl.flag());
        let end = now_epoch();
        let status = match &out {
            Ok(_) => CycleStatus::Ok,
            Err(RunError::Cancelled) => CycleStatus::Cancelled,
            Err(_) => CycleStatus::Failed,
        };
        let entry = TimeEntry { part: item.part, begin, end: Some(end), status };
        if let Some(_g) = self.ctl.guard() {
            if let Err(e) = self.store.log_time(&app, &entry) {
                warn!("time log of {}: {e}", app.short());
            }
        }
        let w = time(&entry).unwrap_or(0.0);
        out.map(|payload| (payload, w))
    }

    /// SEND with retries. A failure consults the tracker: a vanished host
    /// stops the app, a listed one is retried after a pause.
    fn send(&self, part: u32, d: u64, app_bytes: u64, w: f64) -> Sent {
        let app = self.app();
        for attempt in 0..self.cfg.send_attempts {
            if self.ctl.cancelled() {
                return Sent::Exit(WorkerExit::Cancelled);
            }
            // LOAD: the stored copy is what gets submitted.
            let payload = match self.store.load_result(&app, part) {
                Ok(p) => p,
                Err(e) => {
                    warn!("loading result {part} of {}: {e}", app.short());
                    return Sent::GaveUp;
                }
            };
            let msg = Message::new(
                self.me,
                Body::ResultSubmit { app, part, payload: Payload(payload), reported_d: d, app_bytes, reported_w: w },
            );
            match net::exchange(self.host(), &msg, self.cfg.request_timeout) {
                Ok(Some(Message { body: Body::ResultAck { part: p, .. }, .. })) if p == part => return Sent::Ack,
                Ok(Some(Message { body: Body::ResultReject { reason, .. }, .. })) => {
                    debug!("part {part} of {} rejected: {reason}", app.short());
                    return Sent::Rejected;
                }
                Ok(Some(Message { body: Body::Error { code, .. }, .. })) if code == codes::UNKNOWN_APP => {
                    return Sent::Exit(self.stop_here("host does not serve the app"));
                }
                Ok(Some(other)) => debug!("unexpected submit reply {:?}", other.body),
                Ok(None) => {
                    if let Some(exit) = self.after_failure(&ProtocolError::Closed) {
                        return Sent::Exit(exit);
                    }
                }
                Err(e) => {
                    if let Some(exit) = self.after_failure(&e) {
                        return Sent::Exit(exit);
                    }
                }
            }
            let backoff = self.cfg.backoff * 2u32.saturating_pow(attempt.min(5));
            if !self.sleep(backoff) {
                return Sent::Exit(WorkerExit::Cancelled);
            }
        }
        Sent::GaveUp
    }

    /// Drops a finished part's files, or the whole subtree when the app
    /// file is not cached.
    fn cleanup(&self, part: u32) {
        let app = self.app();
        let Some(_g) = self.ctl.guard() else { return };
        let r = if self.cfg.cache_app { self.store.clear_part(&app, part) } else { self.store.remove(&app) };
        if let Err(e) = r {
            warn!("cleaning part {part} of {}: {e}", app.short());
        }
    }

    fn submit_and_settle(&self, part: u32, d: u64, app_bytes: u64, w: f64) -> Option<WorkerExit> {
        match self.send(part, d, app_bytes, w) {
            Sent::Ack => {
                self.emit(EventRecord::new(self.me, "cycle").part(part).bytes(d).seconds(w));
                self.cleanup(part);
            }
            Sent::Rejected => {
                self.emit(EventRecord::new(self.me, "rejected").part(part).bytes(d).seconds(w));
                self.cleanup(part);
            }
            Sent::GaveUp => {
                self.emit(EventRecord::new(self.me, "send_failed").part(part));
                self.cleanup(part);
            }
            Sent::Exit(e) => return Some(e),
        }
        None
    }

    /// Resubmits results saved before a restart.
    fn recover(&self) -> Option<WorkerExit> {
        let app = self.app();
        let pending = self.store.pending_results(&app).unwrap_or_default();
        let times = self.store.read_time_log(&app).unwrap_or_default();
        for part in pending {
            let w = times.iter().rev().find(|t| t.part == part).and_then(time).unwrap_or(0.0);
            let data = std::fs::metadata(self.store.part_path(&app, part)).map_or(0, |m| m.len());
            let app_len = if self.cfg.cache_app { 0 } else { std::fs::metadata(self.store.app_path(&app)).map_or(0, |m| m.len()) };
            info!("resubmitting saved result {part} of {}", app.short());
            if let Some(exit) = self.submit_and_settle(part, data + app_len, app_len, w) {
                return Some(exit);
            }
        }
        None
    }

    /// The worker loop: REQ, SCAN, RUN, COLLECT, SAVE, SEND until the app is
    /// complete, stopped or cancelled.
    pub fn work(&self) -> WorkerExit {
        if let Some(exit) = self.recover() {
            return exit;
        }
        let mut retry = None;
        let mut failures = 0;
        loop {
            if self.ctl.cancelled() {
                return WorkerExit::Cancelled;
            }
            let item = match self.fetch(retry) {
                Fetch::Item(item) => item,
                Fetch::Wait => {
                    if !self.sleep(self.cfg.backoff) {
                        return WorkerExit::Cancelled;
                    }
                    continue;
                }
                Fetch::Retry(part) => {
                    retry = part;
                    continue;
                }
                Fetch::Exit(e) => return e,
            };
            let part = item.part;
            let d = match self.scan(&item) {
                Ok(d) => d,
                Err(e) => {
                    warn!("scan of part {part}: {e}");
                    retry = None;
                    continue;
                }
            };
            self.emit(EventRecord::new(self.me, "scan").part(part).bytes(d));
            let (payload, w) = match self.run(&item) {
                Ok(r) => r,
                Err(RunError::Cancelled) => return WorkerExit::Cancelled,
                Err(e) => {
                    warn!("run of part {part} of {} failed: {e}", self.app().short());
                    self.emit(EventRecord::new(self.me, "run_failed").part(part));
                    failures += 1;
                    retry = (failures <= self.cfg.max_retries).then_some(part);
                    if retry.is_none() {
                        failures = 0;
                        self.cleanup(part);
                    }
                    continue;
                }
            };
            retry = None;
            failures = 0;
            let (d, w) = collect(d, w);
            {
                let Some(_g) = self.ctl.guard() else { return WorkerExit::Cancelled };
                if let Err(e) = self.store.save_result(&self.app(), part, &payload) {
                    warn!("saving result {part}: {e}");
                    continue;
                }
            }
            if let Some(exit) = self.submit_and_settle(part, d, item.app_received, w) {
                return exit;
            }
        }
    }
}

/// TIME: elapsed seconds of a completed entry.
pub fn time(entry: &TimeEntry) -> Option<f64> {
    entry.elapsed()
}

/// COLLECT: the (d, w) pair reported with a result.
pub fn collect(scan: u64, time: f64) -> (u64, f64) {
    (scan, time)
}
