//! The server procedures: RECV, VAL, INIT, PING and PUSH. INFO, WRITE and
//! READ live on the [`Synchronizer`](crate::sync::Synchronizer).

use std::collections::HashSet;
use std::io::{BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use vc_core::protocol::{self, codes, read_frame, write_frame, Body, Message, NodeId, ProtocolError};

use crate::list::{Change, HostRecord, LivenessPolicy, TrackerState};
use crate::sync::Synchronizer;

/// Outcome of RECV.
#[derive(Debug, Clone, PartialEq)]
pub enum Received {
    Routed(Message),
    Dropped,
}

/// RECV: decodes a frame and filters blocklisted senders. A parse error is
/// returned to the caller, which closes the connection.
pub fn recv_message(raw: &[u8], blocklist: &HashSet<NodeId>) -> Result<Received, ProtocolError> {
    let msg = protocol::decode(raw)?;
    if blocklist.contains(&msg.sender) {
        return Ok(Received::Dropped);
    }
    Ok(Received::Routed(msg))
}

#[derive(Debug, thiserror::Error)]
#[error("host hook failed: {0}")]
pub struct HookError(pub String);

/// Customization point for VAL: may veto a host, which blocklists it and
/// drops all of its applications.
pub trait HostHook: Send + Sync {
    fn veto(&self, host: &HostRecord) -> Result<bool, HookError>;
}

impl<F> HostHook for F
where
    F: Fn(&HostRecord) -> Result<bool, HookError> + Send + Sync,
{
    fn veto(&self, host: &HostRecord) -> Result<bool, HookError> {
        self(host)
    }
}

/// Runs `sh -c CMD` with the host record as JSON on stdin. Exit status 0
/// keeps the host, 1 vetoes it; anything else is a hook failure.
#[derive(Debug, Clone)]
pub struct ExecHook {
    pub command: String,
}

impl HostHook for ExecHook {
    fn veto(&self, host: &HostRecord) -> Result<bool, HookError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| HookError(e.to_string()))?;
        if let Some(mut stdin) = child.stdin.take() {
            let json = serde_json::to_vec(host).map_err(|e| HookError(e.to_string()))?;
            let _ = stdin.write_all(&json);
        }
        let status = child.wait().map_err(|e| HookError(e.to_string()))?;
        match status.code() {
            Some(0) => Ok(false),
            Some(1) => Ok(true),
            other => Err(HookError(format!("exit status {other:?}"))),
        }
    }
}

/// Input to VAL.
#[derive(Debug, Clone, PartialEq)]
pub enum HostEvent {
    Ping { node: NodeId, alive: bool },
    Message(Message),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Info(Change),
    /// Answer with the cached list (INIT).
    Init(NodeId),
    Reply(Body),
}

fn consult(hook: Option<&dyn HostHook>, host: &HostRecord) -> bool {
    match hook.map(|h| h.veto(host)) {
        Some(Ok(veto)) => veto,
        Some(Err(e)) => {
            warn!("{e}; host {} kept", host.node);
            false
        }
        None => false,
    }
}

/// VAL: turns a ping status or routed message into synchronizer changes and
/// a reply.
pub fn validate_host(
    event: &HostEvent,
    state: &TrackerState,
    liveness: &LivenessPolicy,
    hook: Option<&dyn HostHook>,
) -> Vec<Action> {
    match event {
        HostEvent::Ping { node, alive } => {
            let Some(host) = state.hosts.get(node).filter(|h| !h.blocked) else {
                return Vec::new();
            };
            let mut observed = host.clone();
            if !alive {
                observed.consecutive_misses += 1;
            }
            if consult(hook, &observed) {
                return vec![Action::Info(Change::BlockHost { node: *node })];
            }
            if *alive {
                vec![Action::Info(Change::Refresh { node: *node })]
            } else if observed.consecutive_misses >= liveness.max_misses() {
                vec![Action::Info(Change::RemoveHost { node: *node })]
            } else {
                vec![Action::Info(Change::Miss { node: *node, limit: liveness.max_misses() })]
            }
        }
        HostEvent::Message(msg) => {
            let node = msg.sender;
            if state.is_blocked(&node) {
                return Vec::new();
            }
            let known = state.hosts.contains_key(&node);
            match &msg.body {
                Body::Hello { address } | Body::Offer { address, .. } => {
                    let record = HostRecord {
                        node,
                        address: address.clone(),
                        last_seen: vc_core::events::now_epoch(),
                        consecutive_misses: 0,
                        blocked: false,
                    };
                    if consult(hook, &record) {
                        return vec![
                            Action::Info(Change::BlockHost { node }),
                            Action::Reply(Body::error(codes::BAD_REQUEST, "host rejected")),
                        ];
                    }
                    let mut actions = vec![Action::Info(Change::RegisterHost { node, address: address.clone() })];
                    if let Body::Offer { apps, .. } = &msg.body {
                        actions.push(Action::Info(Change::UpsertApps { node, apps: apps.clone() }));
                    }
                    actions.push(Action::Init(node));
                    actions
                }
                Body::StatusUpdate { apps } if known => vec![
                    Action::Info(Change::UpsertApps { node, apps: apps.clone() }),
                    Action::Init(node),
                ],
                Body::DropNotice { app } if known => vec![
                    Action::Info(Change::Refresh { node }),
                    Action::Info(Change::DropApp { node, app: *app }),
                    Action::Reply(Body::Pong),
                ],
                Body::Ping if known => vec![Action::Info(Change::Refresh { node }), Action::Reply(Body::Pong)],
                Body::Ping => vec![Action::Reply(Body::Pong)],
                Body::StatusUpdate { .. } | Body::DropNotice { .. } => {
                    vec![Action::Reply(Body::error(crate::UNKNOWN_HOST, "send HELLO or OFFER first"))]
                }
                other => vec![Action::Reply(Body::error(
                    codes::UNEXPECTED,
                    format!("tracker does not handle {}", other.kind()),
                ))],
            }
        }
    }
}

/// INIT: hands newcomers a cached list, refreshed with a READ once the
/// cache is older than its timer.
pub struct InitCache {
    ttl: Duration,
    cached: Mutex<Option<(Instant, Arc<TrackerState>)>>,
}

impl InitCache {
    pub fn new(ttl: Duration) -> Self {
        InitCache { ttl, cached: Mutex::new(None) }
    }

    pub fn snapshot(&self, sync: &Synchronizer) -> Arc<TrackerState> {
        let mut cached = self.cached.lock().unwrap_or_else(|e| e.into_inner());
        match &*cached {
            Some((at, snap)) if at.elapsed() < self.ttl => Arc::clone(snap),
            _ => {
                let snap = sync.read_list();
                *cached = Some((Instant::now(), Arc::clone(&snap)));
                snap
            }
        }
    }

    pub fn init_list(&self, sync: &Synchronizer) -> Body {
        list_push(&self.snapshot(sync))
    }
}

pub fn list_push(state: &TrackerState) -> Body {
    Body::ListPush { revision: state.list.revision, apps: state.list.announcements() }
}

fn connect(address: &str, timeout: Duration) -> std::io::Result<TcpStream> {
    let mut last = None;
    for addr in address.to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| std::io::Error::other("no address")))
}

/// Sends one PING and waits for PONG.
pub fn ping_one(me: NodeId, address: &str, timeout: Duration) -> bool {
    let attempt = || -> Result<bool, ProtocolError> {
        let mut stream = connect(address, timeout)?;
        write_frame(&mut stream, &Message::new(me, Body::Ping))?;
        let mut reader = BufReader::new(stream);
        Ok(matches!(read_frame(&mut reader)?, Some(Message { body: Body::Pong, .. })))
    };
    attempt().unwrap_or(false)
}

/// PING: one round over every non-blocked host, in parallel. Statuses are
/// passed through VAL and the resulting changes to INFO.
pub fn ping_hosts(
    me: NodeId,
    sync: &Synchronizer,
    liveness: &LivenessPolicy,
    hook: Option<&dyn HostHook>,
) -> Vec<(NodeId, bool)> {
    let snapshot = sync.peek();
    let timeout = liveness.ping_timeout();
    let statuses: Vec<(NodeId, bool)> = thread::scope(|s| {
        let handles: Vec<_> = snapshot
            .live_hosts()
            .map(|h| {
                let (node, address) = (h.node, h.address.clone());
                s.spawn(move || (node, ping_one(me, &address, timeout)))
            })
            .collect();
        handles.into_iter().filter_map(|h| h.join().ok()).collect()
    });
    let current = sync.peek();
    for (node, alive) in &statuses {
        for action in validate_host(&HostEvent::Ping { node: *node, alive: *alive }, &current, liveness, hook) {
            if let Action::Info(change) = action {
                sync.info_update(change);
            }
        }
    }
    statuses
}

/// PUSH: sends the full list to every non-blocked host. Unreachable hosts
/// are skipped. Returns how many recipients received it.
pub fn push_list(me: NodeId, state: &TrackerState, timeout: Duration) -> usize {
    let msg = Message::new(me, list_push(state));
    let Ok(frame) = protocol::encode(&msg) else {
        warn!("applications list too large to push");
        return 0;
    };
    thread::scope(|s| {
        let handles: Vec<_> = state
            .live_hosts()
            .map(|h| {
                let address = h.address.clone();
                let frame = &frame;
                s.spawn(move || {
                    connect(&address, timeout)
                        .and_then(|mut stream| stream.write_all(frame))
                        .is_ok()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or(false)).filter(|ok| *ok).count()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vc_core::protocol::{encode, AppId, AppStatus};
    use vc_core::{ValidationPolicy, WorkTotals};

    fn node(n: u8) -> NodeId {
        NodeId::from_bytes([n; 16])
    }

    fn liveness() -> LivenessPolicy {
        LivenessPolicy::new(Duration::from_secs(5), 3).unwrap()
    }

    fn offer(n: u8) -> Message {
        Message::new(
            node(n),
            Body::Offer {
                address: "127.0.0.1:1".into(),
                apps: vec![AppStatus {
                    app: AppId::of(&[n]),
                    part_count: 3,
                    parts_remaining: 3,
                    policy: ValidationPolicy::single(),
                    work: WorkTotals::default(),
                }],
            },
        )
    }

    #[test]
    fn recv_routes_and_drops() {
        let raw = encode(&offer(1)).unwrap();
        assert_eq!(recv_message(&raw, &HashSet::new()).unwrap(), Received::Routed(offer(1)));
        let blocked: HashSet<_> = [node(1)].into_iter().collect();
        assert_eq!(recv_message(&raw, &blocked).unwrap(), Received::Dropped);
        assert!(recv_message(b"{not json\n", &HashSet::new()).is_err());
    }

    #[test]
    fn hello_registers_and_inits() {
        let hello = Message::new(node(1), Body::Hello { address: "h:1".into() });
        let actions = validate_host(&HostEvent::Message(hello), &TrackerState::default(), &liveness(), None);
        assert_eq!(
            actions,
            vec![
                Action::Info(Change::RegisterHost { node: node(1), address: "h:1".into() }),
                Action::Init(node(1)),
            ]
        );
    }

    #[test]
    fn ping_routing() {
        let mut state = TrackerState::default();
        state.apply(&Change::RegisterHost { node: node(1), address: "h:1".into() }, 0.0);
        let alive = validate_host(&HostEvent::Ping { node: node(1), alive: true }, &state, &liveness(), None);
        assert_eq!(alive, vec![Action::Info(Change::Refresh { node: node(1) })]);
        let dead = validate_host(&HostEvent::Ping { node: node(1), alive: false }, &state, &liveness(), None);
        assert_eq!(dead, vec![Action::Info(Change::Miss { node: node(1), limit: 3 })]);
        state.hosts.get_mut(&node(1)).unwrap().consecutive_misses = 2;
        let last = validate_host(&HostEvent::Ping { node: node(1), alive: false }, &state, &liveness(), None);
        assert_eq!(last, vec![Action::Info(Change::RemoveHost { node: node(1) })]);
    }

    #[test]
    fn hook_veto_blocks_and_drops() {
        let sync = Synchronizer::in_memory();
        for a in validate_host(&HostEvent::Message(offer(1)), &sync.peek(), &liveness(), None) {
            if let Action::Info(c) = a {
                sync.write_list(&[c]).unwrap();
            }
        }
        assert_eq!(sync.peek().list.len(), 1);
        let flaky = |h: &HostRecord| -> Result<bool, HookError> { Ok(h.consecutive_misses >= 1) };
        let ev = HostEvent::Ping { node: node(1), alive: false };
        let actions = validate_host(&ev, &sync.peek(), &liveness(), Some(&flaky));
        assert_eq!(actions, vec![Action::Info(Change::BlockHost { node: node(1) })]);
        let rev = sync.revision();
        for a in actions {
            if let Action::Info(c) = a {
                sync.write_list(&[c]).unwrap();
            }
        }
        let snap = sync.peek();
        assert!(snap.list.is_empty());
        assert!(snap.is_blocked(&node(1)));
        // Later messages from the host change nothing.
        let again = validate_host(&HostEvent::Message(offer(1)), &snap, &liveness(), None);
        assert!(again.is_empty());
        assert_eq!(sync.revision(), rev + 1);
    }

    #[test]
    fn failing_hook_does_not_veto() {
        let mut state = TrackerState::default();
        state.apply(&Change::RegisterHost { node: node(1), address: "h:1".into() }, 0.0);
        let broken = |_: &HostRecord| -> Result<bool, HookError> { Err(HookError("boom".into())) };
        let actions =
            validate_host(&HostEvent::Ping { node: node(1), alive: true }, &state, &liveness(), Some(&broken));
        assert_eq!(actions, vec![Action::Info(Change::Refresh { node: node(1) })]);
    }

    #[test]
    fn exec_hook_exit_codes() {
        let host = HostRecord {
            node: node(1),
            address: "h:1".into(),
            last_seen: 0.0,
            consecutive_misses: 2,
            blocked: false,
        };
        assert!(!ExecHook { command: "cat >/dev/null; exit 0".into() }.veto(&host).unwrap());
        assert!(ExecHook { command: "grep -q '\"consecutive_misses\":2'".into() }.veto(&host).is_ok());
        assert!(ExecHook { command: "cat >/dev/null; exit 1".into() }.veto(&host).unwrap());
        assert!(ExecHook { command: "cat >/dev/null; exit 7".into() }.veto(&host).is_err());
    }

    #[test]
    fn status_from_unknown_host_is_refused() {
        let msg = Message::new(node(9), Body::StatusUpdate { apps: vec![] });
        let actions = validate_host(&HostEvent::Message(msg), &TrackerState::default(), &liveness(), None);
        assert!(matches!(&actions[..], [Action::Reply(Body::Error { code, .. })] if code == crate::UNKNOWN_HOST));
    }

    #[test]
    fn init_cache_reads_only_after_timer() {
        let sync = Synchronizer::in_memory();
        let cache = InitCache::new(Duration::from_millis(150));
        assert!(matches!(cache.init_list(&sync), Body::ListPush { revision: 0, ref apps } if apps.is_empty()));
        assert_eq!(sync.read_count(), 1);
        cache.init_list(&sync);
        assert_eq!(sync.read_count(), 1);
        thread::sleep(Duration::from_millis(200));
        cache.init_list(&sync);
        assert_eq!(sync.read_count(), 2);
    }
}
