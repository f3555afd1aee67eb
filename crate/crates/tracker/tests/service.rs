use std::collections::HashSet;
use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use vc_core::metrics::{ValidationPolicy, WorkTotals};
use vc_core::protocol::{read_frame, write_frame, AppId, AppStatus, Body, Message, NodeId};
use vc_tracker::sync::{load_state, LIST_FILE};
use vc_tracker::{start, LivenessPolicy, TrackerConfig, TrackerHandle};

/// A volunteer stand-in: answers PING with PONG unless muted and forwards
/// every LIST_PUSH it receives.
struct FakeVolunteer {
    node: NodeId,
    addr: SocketAddr,
    muted: Arc<AtomicBool>,
    pushes: Receiver<(u64, Vec<AppId>)>,
}

impl FakeVolunteer {
    fn spawn() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let muted = Arc::new(AtomicBool::new(false));
        let (tx, pushes) = mpsc::channel();
        let node = NodeId::random();
        let m = Arc::clone(&muted);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let Ok(Some(msg)) = read_frame(&mut reader) else { continue };
                match msg.body {
                    Body::Ping if !m.load(Ordering::SeqCst) => {
                        let mut s = stream;
                        let _ = write_frame(&mut s, &Message::new(node, Body::Pong));
                    }
                    Body::ListPush { revision, apps } => {
                        let _ = tx.send((revision, apps.iter().map(|a| a.app).collect()));
                    }
                    _ => {}
                }
            }
        });
        FakeVolunteer { node, addr, muted, pushes }
    }

    fn address(&self) -> String {
        self.addr.to_string()
    }
}

fn status(label: u8) -> AppStatus {
    AppStatus {
        app: AppId::of(&[label; 64]),
        part_count: 10,
        parts_remaining: 10,
        policy: ValidationPolicy::single(),
        work: WorkTotals::default(),
    }
}

fn exchange(tracker: SocketAddr, msg: &Message) -> Option<Message> {
    let mut stream = TcpStream::connect(tracker).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write_frame(&mut stream, msg).unwrap();
    read_frame(&mut BufReader::new(stream)).ok().flatten()
}

fn offer(tracker: SocketAddr, v: &FakeVolunteer, apps: Vec<AppStatus>) -> Option<Message> {
    exchange(tracker, &Message::new(v.node, Body::Offer { address: v.address(), apps }))
}

fn config(dir: &std::path::Path, t: f64, f: u32, push: f64) -> TrackerConfig {
    let mut cfg = TrackerConfig::new("127.0.0.1:0".parse().unwrap(), dir);
    cfg.liveness = LivenessPolicy::new(Duration::from_secs_f64(t), f).unwrap();
    cfg.push_interval = Duration::from_secs_f64(push);
    cfg
}

fn wait_until(limit: Duration, mut cond: impl FnMut() -> bool) -> Option<Duration> {
    let start = Instant::now();
    while start.elapsed() < limit {
        if cond() {
            return Some(start.elapsed());
        }
        thread::sleep(Duration::from_millis(20));
    }
    None
}

fn listed(apps: &Body) -> Vec<AppId> {
    match apps {
        Body::ListPush { apps, .. } => apps.iter().map(|a| a.app).collect(),
        other => panic!("expected LIST_PUSH, got {other:?}"),
    }
}

#[test]
fn empty_cloud_init_has_no_entries() {
    let dir = tempfile::tempdir().unwrap();
    let tracker = start(config(dir.path(), 60.0, 5, 0.1)).unwrap();
    let v = FakeVolunteer::spawn();
    let reply = exchange(tracker.addr(), &Message::new(v.node, Body::Hello { address: v.address() })).unwrap();
    assert!(listed(&reply.body).is_empty());
}

#[test]
fn newcomer_receives_every_app_with_addresses() {
    let dir = tempfile::tempdir().unwrap();
    let tracker = start(config(dir.path(), 60.0, 5, 0.1)).unwrap();
    let vols: Vec<FakeVolunteer> = (0..3).map(|_| FakeVolunteer::spawn()).collect();
    for (i, v) in vols.iter().enumerate() {
        offer(tracker.addr(), v, vec![status(i as u8)]).unwrap();
        thread::sleep(Duration::from_millis(150));
    }
    let newcomer = FakeVolunteer::spawn();
    let reply =
        exchange(tracker.addr(), &Message::new(newcomer.node, Body::Hello { address: newcomer.address() })).unwrap();
    let Body::ListPush { apps, .. } = reply.body else { panic!("expected LIST_PUSH") };
    assert_eq!(apps.len(), 3);
    for (i, v) in vols.iter().enumerate() {
        let a = apps.iter().find(|a| a.host == v.node).unwrap();
        assert_eq!(a.app, status(i as u8).app);
        assert_eq!(a.address, v.address());
    }
}

#[test]
fn mute_host_is_removed_within_liveness_window() {
    let dir = tempfile::tempdir().unwrap();
    let (t, f) = (1.0, 3);
    let tracker = start(config(dir.path(), t, f, 0.2)).unwrap();
    let quiet = FakeVolunteer::spawn();
    let steady = FakeVolunteer::spawn();
    offer(tracker.addr(), &quiet, vec![status(1), status(2)]).unwrap();
    offer(tracker.addr(), &steady, vec![status(3)]).unwrap();
    let sync = Arc::clone(tracker.sync());
    assert_eq!(sync.read_list().list.len(), 3);

    // Survives several rounds while answering.
    thread::sleep(Duration::from_secs_f64(2.5 * t));
    assert_eq!(sync.read_list().list.apps_of(&quiet.node).count(), 2);

    quiet.muted.store(true, Ordering::SeqCst);
    let bound = Duration::from_secs_f64(f as f64 * t) + LivenessPolicy::new(Duration::from_secs_f64(t), f)
        .unwrap()
        .ping_timeout();
    // One extra period covers the phase of the ping timer.
    let took = wait_until(bound + Duration::from_secs_f64(t + 0.5), || {
        let s = sync.read_list();
        s.list.apps_of(&quiet.node).count() == 0 && !s.hosts.contains_key(&quiet.node)
    })
    .expect("mute host still listed");
    assert!(took >= Duration::from_secs_f64((f - 1) as f64 * t), "removed too early: {took:?}");
    let s = sync.read_list();
    assert_eq!(s.list.apps_of(&steady.node).count(), 1);
    assert!(s.is_consistent());
}

#[test]
fn malformed_frames_leave_revision_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let tracker = start(config(dir.path(), 60.0, 5, 0.2)).unwrap();
    let v = FakeVolunteer::spawn();
    offer(tracker.addr(), &v, vec![status(1)]).unwrap();
    tracker.sync().flush();
    let before = tracker.sync().revision();
    let garbage: [&[u8]; 5] = [
        b"not json\n",
        b"{\"v\":1}\n",
        b"{\"v\":9,\"sender\":\"00\",\"kind\":\"OFFER\"}\n",
        b"\xff\xfe\x00\n",
        b"{\"v\":1,\"sender\":\"zz\",\"kind\":\"DROP_NOTICE\",\"app\":1}\n",
    ];
    for g in garbage {
        let mut s = TcpStream::connect(tracker.addr()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        s.write_all(g).unwrap();
        assert!(read_frame(&mut BufReader::new(s)).unwrap_or(None).is_none());
    }
    tracker.sync().flush();
    assert_eq!(tracker.sync().revision(), before);
}

#[test]
fn blocklisted_sender_is_dropped_without_revision_change() {
    let dir = tempfile::tempdir().unwrap();
    let blocked = FakeVolunteer::spawn();
    let mut cfg = config(dir.path(), 60.0, 5, 0.2);
    cfg.blocklist = HashSet::from([blocked.node]);
    let tracker = start(cfg).unwrap();
    let before = tracker.sync().revision();
    assert!(offer(tracker.addr(), &blocked, vec![status(7)]).is_none());
    tracker.sync().flush();
    assert_eq!(tracker.sync().revision(), before);
    assert!(!tracker.sync().read_list().hosts.contains_key(&blocked.node));
}

#[test]
fn vetoed_host_is_blocked_and_its_apps_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 60.0, 5, 0.2);
    cfg.hook = Some(Arc::new(vc_tracker::procedures::ExecHook { command: "grep -q '\"address\":\"nowhere' && exit 1; exit 0".into() }));
    let tracker = start(cfg).unwrap();
    let good = FakeVolunteer::spawn();
    assert!(offer(tracker.addr(), &good, vec![status(1)]).is_some());
    let bad = NodeId::random();
    let reply = exchange(
        tracker.addr(),
        &Message::new(bad, Body::Offer { address: "nowhere:1".into(), apps: vec![status(2)] }),
    )
    .unwrap();
    assert!(matches!(reply.body, Body::Error { .. }));
    // Later messages from the vetoed host get no answer at all.
    assert!(exchange(tracker.addr(), &Message::new(bad, Body::Hello { address: "x:1".into() })).is_none());
    tracker.sync().flush();
    let s = tracker.sync().read_list();
    assert!(s.is_blocked(&bad));
    assert_eq!(s.list.apps_of(&bad).count(), 0);
    assert_eq!(s.list.apps_of(&good.node).count(), 1);
}

#[test]
fn restart_reloads_the_same_list() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let tracker = start(config(dir.path(), 60.0, 5, 0.2)).unwrap();
        for i in 0..3 {
            let v = FakeVolunteer::spawn();
            offer(tracker.addr(), &v, vec![status(i), status(i + 10)]).unwrap();
        }
        tracker.sync().flush();
        let state = tracker.sync().read_list();
        let node = tracker.node();
        tracker.shutdown();
        (state, node)
    };
    let on_disk = load_state(&dir.path().join(LIST_FILE)).unwrap().unwrap();
    assert_eq!(on_disk, *before.0);
    let tracker: TrackerHandle = start(config(dir.path(), 60.0, 5, 0.2)).unwrap();
    assert_eq!(*tracker.sync().read_list(), *before.0);
    assert_eq!(tracker.node(), before.1);
}

#[test]
fn revision_changes_are_pushed_once_and_drops_propagate() {
    let dir = tempfile::tempdir().unwrap();
    let push = 0.3;
    let tracker = start(config(dir.path(), 60.0, 5, push)).unwrap();
    let x = FakeVolunteer::spawn();
    let y = FakeVolunteer::spawn();
    offer(tracker.addr(), &x, vec![status(1)]).unwrap();
    offer(tracker.addr(), &y, vec![status(2)]).unwrap();

    let recv = |v: &FakeVolunteer| v.pushes.recv_timeout(Duration::from_secs(3)).expect("no push");
    let (rev, apps) = recv(&x);
    assert_eq!(rev, tracker.sync().revision());
    assert!(apps.contains(&status(2).app));
    recv(&y);
    // Quiet interval: nothing new is pushed.
    assert!(x.pushes.recv_timeout(Duration::from_secs_f64(3.0 * push)).is_err());

    let dropped = status(2).app;
    let reply = exchange(tracker.addr(), &Message::new(y.node, Body::DropNotice { app: dropped })).unwrap();
    assert_eq!(reply.body, Body::Pong);
    let (rev2, apps) = recv(&x);
    assert!(rev2 > rev);
    assert!(!apps.contains(&dropped));
    assert!(apps.contains(&status(1).app));
}

#[test]
fn status_update_refreshes_published_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let tracker = start(config(dir.path(), 60.0, 5, 0.1)).unwrap();
    let v = FakeVolunteer::spawn();
    offer(tracker.addr(), &v, vec![status(1)]).unwrap();
    let mut s = status(1);
    s.parts_remaining = 8;
    s.work = WorkTotals { app_bytes: 4096, data_bytes: 8000, runs: 2, seconds: 3.0 };
    let reply = exchange(tracker.addr(), &Message::new(v.node, Body::StatusUpdate { apps: vec![s.clone()] })).unwrap();
    assert!(matches!(reply.body, Body::ListPush { .. }));
    tracker.sync().flush();
    let state = tracker.sync().read_list();
    let entry = state.list.get(&v.node, &s.app).unwrap();
    assert_eq!(entry.announcement.parts_remaining, 8);
    assert_eq!(entry.announcement.metrics.d, 12_096);
    assert_eq!(entry.announcement.metrics.p, 2);
    assert_eq!(entry.announcement.metrics.w, Some(1.5));
    assert!(entry.last_update >= entry.registered_at);
}
