//! Single-writer synchronizer: WRITE applies change batches atomically and
//! persists them, READ hands out immutable snapshots.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use vc_core::events::{now_epoch, EventLog, EventRecord};
use vc_core::persist::atomic_write;
use vc_core::protocol::NodeId;

use crate::list::{Change, TrackerState, Transition};
use crate::TrackerError;

pub const LIST_FILE: &str = "applist.v1";

#[derive(Serialize, Deserialize)]
struct ListFile {
    v: u32,
    #[serde(flatten)]
    state: TrackerState,
}

/// Loads a persisted list, `Ok(None)` when the file does not exist yet.
pub fn load_state(path: &Path) -> Result<Option<TrackerState>, TrackerError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let file: ListFile = serde_json::from_slice(&bytes)
        .map_err(|e| TrackerError::Persistence(format!("{}: {e}", path.display())))?;
    if file.v != 1 {
        return Err(TrackerError::Persistence(format!("unsupported list version {}", file.v)));
    }
    Ok(Some(file.state))
}

fn encode_state(state: &TrackerState) -> Vec<u8> {
    let mut out = serde_json::to_vec(&ListFile { v: 1, state: state.clone() }).unwrap_or_default();
    out.push(b'\n');
    out
}

enum Queued {
    Change(Change),
    Flush(Sender<()>),
}

pub struct Synchronizer {
    state: Mutex<TrackerState>,
    snapshot: RwLock<Arc<TrackerState>>,
    path: Option<PathBuf>,
    events: Option<Arc<EventLog>>,
    node: NodeId,
    reads: AtomicU64,
    queue: Mutex<Option<Sender<Queued>>>,
}

impl Synchronizer {
    /// In-memory synchronizer, nothing persisted.
    pub fn in_memory() -> Arc<Self> {
        Arc::new(Self::build(TrackerState::default(), None, None, NodeId::from_bytes([0; 16])))
    }

    /// Reloads `dir/applist.v1` if present.
    pub fn open(dir: &Path, events: Option<Arc<EventLog>>, node: NodeId) -> Result<Arc<Self>, TrackerError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LIST_FILE);
        let state = load_state(&path)?.unwrap_or_default();
        Ok(Arc::new(Self::build(state, Some(path), events, node)))
    }

    fn build(state: TrackerState, path: Option<PathBuf>, events: Option<Arc<EventLog>>, node: NodeId) -> Self {
        Synchronizer {
            snapshot: RwLock::new(Arc::new(state.clone())),
            state: Mutex::new(state),
            path,
            events,
            node,
            reads: AtomicU64::new(0),
            queue: Mutex::new(None),
        }
    }

    /// READ: an immutable snapshot at the latest completed WRITE.
    pub fn read_list(&self) -> Arc<TrackerState> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.peek()
    }

    /// Snapshot without counting as a READ (pinger and pusher bookkeeping).
    pub fn peek(&self) -> Arc<TrackerState> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn revision(&self) -> u64 {
        self.peek().list.revision
    }

    /// WRITE: applies `batch` atomically. The revision advances when published
    /// entries change; the file is rewritten whenever anything durable
    /// changed. On a persistence failure nothing is committed.
    pub fn write_list(&self, batch: &[Change]) -> Result<u64, TrackerError> {
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if batch.is_empty() {
            return Ok(state.list.revision);
        }
        let mut next = state.clone();
        let outcome = next.apply_batch(batch, now_epoch());
        if outcome.entries_changed {
            next.list.revision += 1;
        }
        if outcome.entries_changed || outcome.hosts_changed {
            if let Some(path) = &self.path {
                atomic_write(path, &encode_state(&next))
                    .map_err(|e| TrackerError::Persistence(format!("{}: {e}", path.display())))?;
            }
        }
        *state = next;
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(state.clone());
        self.log_transitions(&outcome.transitions, state.list.revision, outcome.entries_changed);
        Ok(state.list.revision)
    }

    fn log_transitions(&self, transitions: &[Transition], revision: u64, bumped: bool) {
        for t in transitions {
            let (event, node, app) = match t {
                Transition::HostAdded(n) => ("host-added", n, None),
                Transition::HostExpired(n) => ("host-expired", n, None),
                Transition::HostBlocked(n) => ("host-blocked", n, None),
                Transition::AppAdded(n, a) => ("app-added", n, Some(a)),
                Transition::AppDropped(n, a) => ("app-dropped", n, Some(a)),
            };
            info!("{event} host={node}{}", app.map(|a| format!(" app={}", a.short())).unwrap_or_default());
            if let Some(log) = &self.events {
                let mut rec = EventRecord::new(self.node, event).peer(node);
                if let Some(a) = app {
                    rec = rec.app(a);
                }
                log.emit(rec);
            }
        }
        if bumped {
            info!("revision {revision}");
            if let Some(log) = &self.events {
                log.emit(EventRecord::new(self.node, "revision").bytes(revision));
            }
        }
    }

    /// Starts the writer thread that drains queued changes into batches.
    pub fn start_writer(self: &Arc<Self>) -> JoinHandle<()> {
        let (tx, rx) = mpsc::channel();
        *self.queue.lock().unwrap_or_else(|e| e.into_inner()) = Some(tx);
        let me = Arc::clone(self);
        thread::Builder::new()
            .name("tracker-writer".into())
            .spawn(move || me.writer_loop(rx))
            .expect("spawn writer")
    }

    fn writer_loop(&self, rx: Receiver<Queued>) {
        while let Ok(first) = rx.recv() {
            let mut batch = Vec::new();
            let mut flushes = Vec::new();
            let mut next = Some(first);
            while let Some(item) = next {
                match item {
                    Queued::Change(c) => batch.push(c),
                    Queued::Flush(done) => flushes.push(done),
                }
                next = rx.try_recv().ok();
            }
            if let Err(e) = self.write_list(&batch) {
                warn!("write failed, batch of {} changes discarded: {e}", batch.len());
            }
            for done in flushes {
                let _ = done.send(());
            }
        }
    }

    /// INFO: enqueues a change for the writer. Changes from one caller are
    /// applied in the order they were enqueued. Without a writer thread the
    /// change is applied immediately.
    pub fn info_update(&self, change: Change) {
        let queue = self.queue.lock().unwrap_or_else(|e| e.into_inner()).clone();
        match queue {
            Some(tx) => {
                if let Err(mpsc::SendError(Queued::Change(c))) = tx.send(Queued::Change(change)) {
                    let _ = self.write_list(&[c]);
                }
            }
            None => {
                if let Err(e) = self.write_list(&[change]) {
                    warn!("write failed: {e}");
                }
            }
        }
    }

    /// Blocks until every change enqueued before this call has been written.
    pub fn flush(&self) {
        let queue = self.queue.lock().unwrap_or_else(|e| e.into_inner()).clone();
        if let Some(tx) = queue {
            let (done_tx, done_rx) = mpsc::channel();
            if tx.send(Queued::Flush(done_tx)).is_ok() {
                let _ = done_rx.recv();
            }
        }
    }

    /// Closes the queue so the writer thread exits after draining it.
    pub fn stop_writer(&self) {
        self.queue.lock().unwrap_or_else(|e| e.into_inner()).take();
    }
}
