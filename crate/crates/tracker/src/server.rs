//! Tracker runtime: connection sessions, the ping loop and the push loop
//! around one synchronizer.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use vc_core::events::{EventLog, EVENT_LOG_FILE};
use vc_core::protocol::{self, Message, NodeId, MAX_FRAME_BYTES};

use crate::list::LivenessPolicy;
use crate::procedures::{
    list_push, ping_hosts, push_list, recv_message, validate_host, Action, HostEvent, HostHook, InitCache,
    Received,
};
use crate::sync::Synchronizer;
use crate::TrackerError;

#[derive(Clone)]
pub struct TrackerConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    pub liveness: LivenessPolicy,
    /// Minimum spacing of LIST_PUSH rounds; also the INIT cache timer.
    pub push_interval: Duration,
    pub blocklist: HashSet<NodeId>,
    pub hook: Option<Arc<dyn HostHook>>,
}

impl TrackerConfig {
    pub fn new(bind: SocketAddr, data_dir: impl Into<PathBuf>) -> Self {
        TrackerConfig {
            bind,
            data_dir: data_dir.into(),
            liveness: LivenessPolicy::default(),
            push_interval: Duration::from_secs(10),
            blocklist: HashSet::new(),
            hook: None,
        }
    }
}

/// Reads one node id per line; blank lines and `#` comments are skipped.
pub fn load_blocklist(path: &Path) -> Result<HashSet<NodeId>, TrackerError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse().map_err(|e| TrackerError::Config(format!("blocklist: {e}"))))
        .collect()
}

struct Shared {
    me: NodeId,
    cfg: TrackerConfig,
    sync: Arc<Synchronizer>,
    init: InitCache,
    shutdown: AtomicBool,
}

pub struct TrackerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl TrackerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn node(&self) -> NodeId {
        self.shared.me
    }

    pub fn sync(&self) -> &Arc<Synchronizer> {
        &self.shared.sync
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        self.shared.sync.stop_writer();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the tracker shuts down.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TrackerHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop();
        }
    }
}

pub fn start(cfg: TrackerConfig) -> Result<TrackerHandle, TrackerError> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    let me = vc_core::persist::load_or_create_node_id(&cfg.data_dir)?;
    let events = Arc::new(EventLog::open(cfg.data_dir.join(EVENT_LOG_FILE))?);
    let sync = Synchronizer::open(&cfg.data_dir, Some(events), me)?;
    let listener = TcpListener::bind(cfg.bind)?;
    let addr = listener.local_addr()?;
    info!("tracker {me} listening on {addr}");
    let shared = Arc::new(Shared {
        me,
        init: InitCache::new(cfg.push_interval),
        cfg,
        sync,
        shutdown: AtomicBool::new(false),
    });
    let mut threads = vec![shared.sync.start_writer()];
    {
        let s = Arc::clone(&shared);
        threads.push(thread::Builder::new().name("tracker-accept".into()).spawn(move || accept_loop(s, listener))?);
    }
    {
        let s = Arc::clone(&shared);
        threads.push(thread::Builder::new().name("tracker-ping".into()).spawn(move || ping_loop(s))?);
    }
    {
        let s = Arc::clone(&shared);
        threads.push(thread::Builder::new().name("tracker-push".into()).spawn(move || push_loop(s))?);
    }
    Ok(TrackerHandle { addr, shared, threads })
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let s = Arc::clone(&shared);
                let _ = thread::Builder::new().name("tracker-session".into()).spawn(move || session(&s, stream));
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

fn session(shared: &Shared, stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let _ = stream.set_write_timeout(Some(Duration::from_secs(10)));
    let mut reader = BufReader::new(&stream);
    let mut raw = Vec::new();
    match reader.by_ref().take(MAX_FRAME_BYTES as u64 + 1).read_until(b'\n', &mut raw) {
        Ok(0) | Err(_) => return,
        Ok(_) => {}
    }
    let msg = match recv_message(&raw, &shared.cfg.blocklist) {
        Ok(Received::Routed(m)) => m,
        Ok(Received::Dropped) => {
            debug!("dropped message from blocklisted sender");
            return;
        }
        Err(e) => {
            debug!("closing connection: {e}");
            return;
        }
    };
    let state = shared.sync.peek();
    let actions = validate_host(&HostEvent::Message(msg), &state, &shared.cfg.liveness, shared.cfg.hook.as_deref());
    let mut reply = None;
    let mut queued = false;
    for action in actions {
        match action {
            Action::Info(change) => {
                shared.sync.info_update(change);
                queued = true;
            }
            Action::Init(_) => reply = Some(None),
            Action::Reply(body) => reply = Some(Some(body)),
        }
    }
    // Replies are sent only once this session's changes are written, so a
    // newcomer sees its own offer and a vetoed host is already blocked.
    if queued && reply.is_some() {
        shared.sync.flush();
    }
    let reply = reply.map(|r| r.unwrap_or_else(|| shared.init.init_list(&shared.sync)));
    if let Some(body) = reply {
        let mut w = &stream;
        if let Ok(bytes) = protocol::encode(&Message::new(shared.me, body)) {
            let _ = w.write_all(&bytes);
        }
    }
}

fn sleep_unless_shutdown(shared: &Shared, d: Duration) -> bool {
    let deadline = Instant::now() + d;
    while Instant::now() < deadline {
        if shared.shutdown.load(Ordering::SeqCst) {
            return false;
        }
        thread::sleep((deadline - Instant::now()).min(Duration::from_millis(50)));
    }
    !shared.shutdown.load(Ordering::SeqCst)
}

fn ping_loop(shared: Arc<Shared>) {
    let period = shared.cfg.liveness.period();
    // Fixed-rate rounds: a slow round does not push the next one back.
    let mut next = Instant::now() + period;
    while sleep_unless_shutdown(&shared, next.saturating_duration_since(Instant::now())) {
        next += period;
        let statuses = ping_hosts(shared.me, &shared.sync, &shared.cfg.liveness, shared.cfg.hook.as_deref());
        let missed = statuses.iter().filter(|(_, alive)| !alive).count();
        if missed > 0 {
            debug!("ping round: {missed}/{} hosts missed", statuses.len());
        }
    }
}

fn push_loop(shared: Arc<Shared>) {
    let mut pushed = shared.sync.revision();
    let timeout = shared.cfg.liveness.ping_timeout().max(Duration::from_millis(500));
    let spacing = shared.cfg.push_interval;
    let tick = (spacing / 10).clamp(Duration::from_millis(10), Duration::from_millis(100));
    let mut last = Instant::now();
    while sleep_unless_shutdown(&shared, tick) {
        let snapshot = shared.sync.peek();
        if snapshot.list.revision == pushed || last.elapsed() < spacing {
            continue;
        }
        pushed = snapshot.list.revision;
        last = Instant::now();
        let n = push_list(shared.me, &snapshot, timeout);
        debug!("pushed revision {pushed} to {n} volunteers");
    }
}

/// LIST_PUSH body for the current state, for callers outside the loops.
pub fn current_list(sync: &Synchronizer) -> vc_core::protocol::Body {
    list_push(&sync.read_list())
}
