//! Agent runtime: peer listener, tracker loop, TAIL timer and one worker
//! thread per leeched app.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use vc_core::events::{now_epoch, EventLog, EventRecord, EVENT_LOG_FILE};
use vc_core::persist::load_or_create_node_id;
use vc_core::protocol::{self, codes, AppAnnouncement, AppId, Body, Message, NodeId, MAX_FRAME_BYTES};
use vc_core::workloads::WorkUnit;

use crate::leecher::{stop, AppControl, LeechConfig, ListSource, Worker, WorkerExit};
use crate::net;
use crate::runner::Runner;
use crate::seeder::{SeedConfig, Seeder};
use crate::store::LeechStore;
use crate::AgentError;

/// Which foreign apps to work on.
#[derive(Debug, Clone, PartialEq)]
pub enum LeechFilter {
    All,
    Apps(HashSet<AppId>),
}

impl LeechFilter {
    pub fn none() -> Self {
        LeechFilter::Apps(HashSet::new())
    }

    pub fn wants(&self, app: &AppId) -> bool {
        match self {
            LeechFilter::All => true,
            LeechFilter::Apps(set) => set.contains(app),
        }
    }
}

pub struct AgentConfig {
    pub tracker: String,
    pub bind: SocketAddr,
    /// Address published to the tracker; defaults to the bound address.
    pub advertise: Option<String>,
    pub data_dir: PathBuf,
    pub seeds: Vec<(Vec<u8>, Vec<WorkUnit>)>,
    pub seed: SeedConfig,
    pub leech: LeechFilter,
    pub leech_cfg: LeechConfig,
    pub runner: Arc<dyn Runner>,
    pub deny: HashSet<NodeId>,
    /// Period of STATUS_UPDATE heartbeats.
    pub heartbeat: Duration,
    /// Minimum spacing of status updates triggered by accepted results.
    pub stat_gap: Duration,
}

impl AgentConfig {
    pub fn new(tracker: impl Into<String>, data_dir: impl Into<PathBuf>, runner: Arc<dyn Runner>) -> Self {
        AgentConfig {
            tracker: tracker.into(),
            bind: SocketAddr::from(([127, 0, 0, 1], protocol::DEFAULT_PEER_PORT)),
            advertise: None,
            data_dir: data_dir.into(),
            seeds: Vec::new(),
            seed: SeedConfig::default(),
            leech: LeechFilter::All,
            leech_cfg: LeechConfig::default(),
            runner,
            deny: HashSet::new(),
            heartbeat: Duration::from_secs(5),
            stat_gap: Duration::from_millis(100),
        }
    }
}

struct WorkerSlot {
    ctl: Arc<AppControl>,
    host: NodeId,
    thread: JoinHandle<()>,
}

#[derive(Default)]
struct Workers {
    running: BTreeMap<AppId, WorkerSlot>,
    /// Apps whose seeder reported completion; never restarted.
    done: HashSet<AppId>,
}

struct Shared {
    me: NodeId,
    address: String,
    cfg: AgentConfig,
    seeder: Seeder,
    leech_store: LeechStore,
    events: Arc<EventLog>,
    workers: Mutex<Workers>,
    list: Mutex<Vec<AppAnnouncement>>,
    list_revision: AtomicU64,
    tracker_node: Mutex<Option<NodeId>>,
    stat_tx: Mutex<Sender<()>>,
    shutdown: AtomicBool,
}

pub struct AgentHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl AgentHandle {
    pub fn node(&self) -> NodeId {
        self.shared.me
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn seeder(&self) -> &Seeder {
        &self.shared.seeder
    }

    pub fn leech_store(&self) -> &LeechStore {
        &self.shared.leech_store
    }

    /// Latest applications list seen.
    pub fn list(&self) -> Vec<AppAnnouncement> {
        self.shared.list.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Apps with a live worker.
    pub fn working_on(&self) -> Vec<AppId> {
        let w = self.shared.workers.lock().unwrap_or_else(|e| e.into_inner());
        w.running.iter().filter(|(_, s)| !s.thread.is_finished()).map(|(a, _)| *a).collect()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        let _ = self.shared.stat_tx.lock().map(|tx| tx.send(()));
        let slots: Vec<WorkerSlot> = {
            let mut w = self.shared.workers.lock().unwrap_or_else(|e| e.into_inner());
            std::mem::take(&mut w.running).into_values().collect()
        };
        for s in &slots {
            s.ctl.flag().store(true, Ordering::SeqCst);
        }
        for s in slots {
            let _ = s.thread.join();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop();
        }
    }
}

pub fn start(cfg: AgentConfig) -> Result<AgentHandle, AgentError> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    let me = load_or_create_node_id(&cfg.data_dir)?;
    let events = Arc::new(EventLog::open(cfg.data_dir.join(EVENT_LOG_FILE))?);
    let seeder = Seeder::open(me, &cfg.data_dir, &cfg.seeds, cfg.seed.clone(), Some(Arc::clone(&events)))?;
    let listener = TcpListener::bind(cfg.bind)?;
    let addr = listener.local_addr()?;
    let address = cfg.advertise.clone().unwrap_or_else(|| addr.to_string());
    info!("agent {me} listening on {addr}, seeding {} apps", seeder.app_ids().len());
    let (stat_tx, stat_rx) = mpsc::channel();
    let shared = Arc::new(Shared {
        me,
        address,
        leech_store: LeechStore::new(&cfg.data_dir),
        cfg,
        seeder,
        events,
        workers: Mutex::new(Workers::default()),
        list: Mutex::new(Vec::new()),
        list_revision: AtomicU64::new(0),
        tracker_node: Mutex::new(None),
        stat_tx: Mutex::new(stat_tx),
        shutdown: AtomicBool::new(false),
    });
    shared.events.emit(EventRecord::new(me, "start"));
    let mut threads = Vec::new();
    let s = Arc::clone(&shared);
    threads.push(thread::Builder::new().name("agent-accept".into()).spawn(move || accept_loop(s, listener))?);
    let s = Arc::clone(&shared);
    threads.push(thread::Builder::new().name("agent-tracker".into()).spawn(move || tracker_loop(s, stat_rx))?);
    let s = Arc::clone(&shared);
    threads.push(thread::Builder::new().name("agent-tail".into()).spawn(move || tail_loop(s))?);
    Ok(AgentHandle { addr, shared, threads })
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let s = Arc::clone(&shared);
                let _ = thread::Builder::new().name("agent-session".into()).spawn(move || session(&s, stream));
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

/// Outcome of RECV on the agent.
#[derive(Debug, Clone, PartialEq)]
pub enum Routed {
    Message(Message),
    Dropped,
}

/// RECV: decodes a frame and drops denied senders.
pub fn recv(raw: &[u8], deny: &HashSet<NodeId>) -> Result<Routed, protocol::ProtocolError> {
    let msg = protocol::decode(raw)?;
    if deny.contains(&msg.sender) {
        return Ok(Routed::Dropped);
    }
    Ok(Routed::Message(msg))
}

fn session(shared: &Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let _ = stream.set_write_timeout(Some(Duration::from_secs(10)));
    let _ = stream.set_nodelay(true);
    let mut raw = Vec::new();
    let mut reader = BufReader::new(&stream);
    match reader.by_ref().take(MAX_FRAME_BYTES as u64 + 1).read_until(b'\n', &mut raw) {
        Ok(0) | Err(_) => return,
        Ok(_) => {}
    }
    let msg = match recv(&raw, &shared.cfg.deny) {
        Ok(Routed::Message(m)) => m,
        Ok(Routed::Dropped) => return,
        Err(e) => {
            debug!("closing peer connection: {e}");
            return;
        }
    };
    let replies = route(shared, msg);
    let mut w = &stream;
    for body in replies {
        match protocol::encode(&Message::new(shared.me, body)) {
            Ok(bytes) => {
                if w.write_all(&bytes).is_err() {
                    return;
                }
            }
            Err(e) => warn!("reply not sent: {e}"),
        }
    }
}

fn route(shared: &Arc<Shared>, msg: Message) -> Vec<Body> {
    let sender = msg.sender;
    match msg.body {
        Body::Ping => vec![Body::Pong],
        Body::ListPush { revision, apps } => {
            let from_tracker = shared.tracker_node.lock().map(|t| t.is_none_or(|t| t == sender)).unwrap_or(true);
            if from_tracker {
                apply_list(shared, revision, apps);
            }
            Vec::new()
        }
        Body::WorkRequest { app, want_app, part } => shared.seeder.dist(sender, &app, want_app, part),
        Body::ResultSubmit { app, part, payload, reported_d, app_bytes, reported_w } => {
            let out = shared.seeder.submit(sender, &app, part, &payload.0, reported_d, app_bytes, reported_w);
            if out.accepted {
                request_stat(shared);
            }
            vec![out.reply]
        }
        other => vec![Body::error(codes::UNEXPECTED, format!("agent does not handle {}", other.kind()))],
    }
}

fn request_stat(shared: &Shared) {
    if let Ok(tx) = shared.stat_tx.lock() {
        let _ = tx.send(());
    }
}

/// Sends one message to the tracker and applies a LIST_PUSH reply.
fn tracker_exchange(shared: &Arc<Shared>, body: Body) -> Option<Body> {
    let msg = Message::new(shared.me, body);
    match net::exchange(&shared.cfg.tracker, &msg, Duration::from_secs(5)) {
        Ok(Some(reply)) => {
            if let Ok(mut t) = shared.tracker_node.lock() {
                *t = Some(reply.sender);
            }
            if let Body::ListPush { revision, apps } = &reply.body {
                apply_list(shared, *revision, apps.clone());
            }
            Some(reply.body)
        }
        Ok(None) => None,
        Err(e) => {
            debug!("tracker unreachable: {e}");
            None
        }
    }
}

fn offer(shared: &Arc<Shared>) -> Option<Body> {
    tracker_exchange(shared, Body::Offer { address: shared.address.clone(), apps: shared.seeder.statuses() })
}

/// STAT: reports seeded apps' status; re-registers when the tracker has
/// forgotten this host.
fn stat(shared: &Arc<Shared>) -> Option<Body> {
    match tracker_exchange(shared, Body::StatusUpdate { apps: shared.seeder.statuses() }) {
        Some(Body::Error { code, .. }) if code == codes::UNKNOWN_HOST => offer(shared),
        other => other,
    }
}

fn tracker_loop(shared: Arc<Shared>, stat_rx: Receiver<()>) {
    let mut registered = offer(&shared).is_some();
    let mut last = Instant::now();
    while !shared.shutdown.load(Ordering::SeqCst) {
        let wait = shared.cfg.heartbeat.saturating_sub(last.elapsed());
        match stat_rx.recv_timeout(wait) {
            Ok(()) => {
                // Coalesce bursts of accepted results into one update.
                thread::sleep(shared.cfg.stat_gap);
                while stat_rx.try_recv().is_ok() {}
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let reply = if registered { stat(&shared) } else { offer(&shared) };
        registered = reply.is_some();
        last = Instant::now();
    }
}

fn tail_loop(shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(250));
        if shared.seeder.tail(now_epoch()) > 0 {
            debug!("reissued timed-out parts");
        }
    }
}

/// Replaces the local list and diffs it: vanished apps are stopped, new
/// wanted apps get a worker.
fn apply_list(shared: &Arc<Shared>, revision: u64, apps: Vec<AppAnnouncement>) {
    if shared.shutdown.load(Ordering::SeqCst) {
        return;
    }
    let mut workers = shared.workers.lock().unwrap_or_else(|e| e.into_inner());
    if revision < shared.list_revision.load(Ordering::SeqCst) {
        return;
    }
    shared.list_revision.store(revision, Ordering::SeqCst);
    *shared.list.lock().unwrap_or_else(|e| e.into_inner()) = apps.clone();

    let listed: HashSet<(NodeId, AppId)> = apps.iter().map(|a| (a.host, a.app)).collect();
    let gone: Vec<AppId> = workers
        .running
        .iter()
        .filter(|(app, slot)| !listed.contains(&(slot.host, **app)))
        .map(|(app, _)| *app)
        .collect();
    for app in gone {
        if let Some(slot) = workers.running.remove(&app) {
            info!("app {} left the list; stopping", app.short());
            stop(&slot.ctl, &shared.leech_store, &app);
            shared.events.emit(EventRecord::new(shared.me, "stop").app(app).peer(slot.host));
        }
    }
    for a in apps.iter().filter(|a| shared.cfg.leech.wants(&a.app)) {
        let finished = workers.running.get(&a.app).is_some_and(|s| s.thread.is_finished());
        if finished {
            workers.running.remove(&a.app);
        }
        if workers.running.contains_key(&a.app) || workers.done.contains(&a.app) || a.parts_remaining == 0 {
            continue;
        }
        spawn_worker(shared, &mut workers, a.clone());
    }
}

fn spawn_worker(shared: &Arc<Shared>, workers: &mut Workers, announcement: AppAnnouncement) {
    let app = announcement.app;
    let host = announcement.host;
    let ctl = Arc::new(AppControl::default());
    let weak = Arc::downgrade(shared);
    let refresh: ListSource = Arc::new(move || {
        let s = weak.upgrade()?;
        match stat(&s)? {
            Body::ListPush { apps, .. } => Some(apps),
            _ => None,
        }
    });
    let worker = Worker {
        me: shared.me,
        announcement,
        store: shared.leech_store.clone(),
        runner: Arc::clone(&shared.cfg.runner),
        cfg: shared.cfg.leech_cfg.clone(),
        events: Some(Arc::clone(&shared.events)),
        ctl: Arc::clone(&ctl),
        refresh,
    };
    let s = Arc::clone(shared);
    let spawned = thread::Builder::new().name(format!("worker-{}", app.short())).spawn(move || {
        info!("leeching app {} from {}", app.short(), worker.announcement.address);
        let exit = worker.work();
        if exit == WorkerExit::Complete {
            stop(&worker.ctl, &worker.store, &app);
            s.events.emit(EventRecord::new(s.me, "leech_done").app(app).peer(host));
            s.workers.lock().unwrap_or_else(|e| e.into_inner()).done.insert(app);
        }
        debug!("worker for {} ended: {exit:?}", app.short());
    });
    match spawned {
        Ok(thread) => {
            workers.running.insert(app, WorkerSlot { ctl, host, thread });
        }
        Err(e) => warn!("cannot start worker for {}: {e}", app.short()),
    }
}
