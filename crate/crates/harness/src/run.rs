//! Runs a scenario: writes the apps, starts the tracker and the agents,
//! watches their files until the work is done, then builds the report.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::thread;
use std::time::{Duration, Instant};

use vc_agent::appspec::{make_prime_app, AppSpec, APP_FILE_NAME};
use vc_agent::store::{read_tracker_log, LeechStore, SeedStore, TrackerLine};
use vc_core::events::{read_events, EventRecord, EVENT_LOG_FILE};
use vc_core::protocol::{AppAnnouncement, AppId};
use vc_core::workloads::{encode_data_part, parse_payload, partition_range, run_prime_search, RangeSpec};
use vc_tracker::sync::{load_state, LIST_FILE};

use crate::cluster::{Binaries, Proc};
use crate::report::{AppRow, ClientRow, FaultOutcome, ScenarioReport};
use crate::scenario::{Leech, NodeSpec, ScenarioConfig};
use crate::HarnessError;

const POLL: Duration = Duration::from_millis(50);
/// How long leechers get to notice completion once every part is accepted.
const SETTLE: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    /// Kill `node` once a seeder assigns it a part with index `at_part` or above.
    KillLeecher { node: String, at_part: u32 },
    /// `node` corrupts this fraction of its results.
    CorruptResult { node: String, rate: f64, seed: u64 },
    /// Freeze the seeder `node` this long after the agents start.
    MuteSeeder { node: String, after: Duration },
}

impl Fault {
    fn validate(&self, cfg: &ScenarioConfig) -> Result<(), HarnessError> {
        let node = |name: &str| {
            cfg.node(name).ok_or_else(|| HarnessError::Config(format!("fault names unknown node {name}")))
        };
        match self {
            Fault::KillLeecher { node: n, .. } if node(n)?.leech == Leech::None => {
                Err(HarnessError::Config(format!("{n} leeches nothing")))
            }
            Fault::CorruptResult { node: n, rate, .. } => {
                node(n)?;
                if (0.0..=1.0).contains(rate) {
                    Ok(())
                } else {
                    Err(HarnessError::Config(format!("corrupt rate {rate} is outside [0, 1]")))
                }
            }
            Fault::MuteSeeder { node: n, .. } if node(n)?.seeds.is_empty() => {
                Err(HarnessError::Config(format!("{n} seeds nothing")))
            }
            Fault::KillLeecher { node: n, .. } | Fault::MuteSeeder { node: n, .. } => node(n).map(|_| ()),
        }
    }
}

/// Where a run keeps its files.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Layout { out: out.into() }
    }

    pub fn tracker_dir(&self) -> PathBuf {
        self.out.join("tracker")
    }

    pub fn node_dir(&self, name: &str) -> PathBuf {
        self.out.join("nodes").join(name)
    }

    pub fn app_dir(&self, label: &str) -> PathBuf {
        self.out.join("apps").join(label)
    }

    pub fn app_id(&self, label: &str) -> Result<AppId, HarnessError> {
        Ok(AppId::of(&std::fs::read(self.app_dir(label).join(APP_FILE_NAME))?))
    }

    pub fn events(&self, name: &str) -> Vec<EventRecord> {
        read_events(self.node_dir(name).join(EVENT_LOG_FILE)).unwrap_or_default()
    }

    pub fn seed_store(&self, name: &str) -> SeedStore {
        SeedStore::new(&self.node_dir(name))
    }

    pub fn leech_store(&self, name: &str) -> LeechStore {
        LeechStore::new(&self.node_dir(name))
    }

    /// The tracker's persisted applications list.
    pub fn published(&self) -> Vec<AppAnnouncement> {
        match load_state(&self.tracker_dir().join(LIST_FILE)) {
            Ok(Some(state)) => state.list.announcements(),
            _ => Vec::new(),
        }
    }

    pub fn tracker_log(&self, seeder: &str, app: &AppId) -> Vec<(f64, TrackerLine)> {
        read_tracker_log(&self.seed_store(seeder).tracker_log_path(app)).unwrap_or_default()
    }
}

struct App {
    label: String,
    id: AppId,
    range: RangeSpec,
    spec: AppSpec,
    seeder: String,
}

fn prepare(cfg: &ScenarioConfig, layout: &Layout) -> Result<Vec<App>, HarnessError> {
    if std::fs::read_dir(&cfg.out).is_ok_and(|mut d| d.next().is_some()) {
        return Err(HarnessError::Config(format!("{} is not empty", cfg.out.display())));
    }
    cfg.apps
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let range = a.scaled(cfg.scale)?;
            let (id, spec) = make_prime_app(&layout.app_dir(&a.label), &a.label, &range)?;
            let seeder = cfg.seeder_of(i).map(|n| n.name.clone()).unwrap_or_default();
            Ok(App { label: a.label.clone(), id, range, spec, seeder })
        })
        .collect()
}

fn secs(d: Duration) -> String {
    d.as_secs_f64().to_string()
}

fn tracker_args(cfg: &ScenarioConfig, layout: &Layout) -> Vec<String> {
    let mut a: Vec<String> = ["serve", "--host", "127.0.0.1", "--port", "0"].map(String::from).to_vec();
    a.extend(["--data-dir".into(), layout.tracker_dir().display().to_string()]);
    a.extend(["--ping-interval".into(), secs(cfg.ping_interval)]);
    a.extend(["--max-misses".into(), cfg.max_misses.to_string()]);
    a.extend(["--push-interval".into(), secs(cfg.push_interval)]);
    a
}

fn agent_args(cfg: &ScenarioConfig, layout: &Layout, apps: &[App], node: &NodeSpec, tracker: &Proc, fault: Option<&Fault>) -> Vec<String> {
    let mut a: Vec<String> = ["run", "--host", "127.0.0.1", "--peer-port", "0"].map(String::from).to_vec();
    a.extend(["--tracker".into(), tracker.addr.to_string()]);
    a.extend(["--data-dir".into(), layout.node_dir(&node.name).display().to_string()]);
    a.extend(["--m-min".into(), cfg.m_min.to_string(), "--m-max".into(), cfg.m_max.to_string()]);
    a.extend(["--work-timeout".into(), cfg.work_timeout.to_string()]);
    a.extend(["--heartbeat".into(), secs(cfg.heartbeat)]);
    a.extend(["--cache-app".into(), cfg.cache_app.to_string()]);
    for &i in &node.seeds {
        a.extend(["--seed".into(), format!("{},{}", apps[i].spec.app.display(), apps[i].spec.manifest.display())]);
    }
    a.push("--leech".into());
    match &node.leech {
        Leech::None => a.push("none".into()),
        Leech::All => a.push("all".into()),
        Leech::Apps(ids) if ids.is_empty() => a.push("none".into()),
        Leech::Apps(ids) => a.extend(ids.iter().map(|&i| apps[i].id.to_string())),
    }
    if let Some(Fault::CorruptResult { node: n, rate, seed }) = fault {
        if *n == node.name {
            a.extend(["--fault-corrupt-rate".into(), rate.to_string(), "--fault-seed".into(), seed.to_string()]);
        }
    }
    a
}

fn accepted_count(layout: &Layout, apps: &[App]) -> usize {
    apps.iter()
        .map(|a| layout.seed_store(&a.seeder).accepted_parts(&a.id).map_or(0, |p| p.len()))
        .sum()
}

fn has_event(events: &[EventRecord], name: &str, app: &str) -> bool {
    events.iter().any(|e| e.event == name && e.app.as_deref() == Some(app))
}

/// Every client that worked on an app has seen it finish or stop.
fn settled(cfg: &ScenarioConfig, layout: &Layout, apps: &[App]) -> bool {
    cfg.roster.iter().all(|n| {
        let ev = layout.events(&n.name);
        apps.iter().all(|a| {
            let id = a.id.to_string();
            !has_event(&ev, "recv", &id) || has_event(&ev, "leech_done", &id) || has_event(&ev, "stop", &id)
        })
    })
}

fn dump(procs: &[Proc], why: &str, accepted: usize) -> String {
    let mut out = format!("{why}; {accepted} parts accepted so far\n");
    for p in procs {
        let _ = writeln!(out, "--- {} ({}) stderr tail:\n{}", p.name, p.node, p.stderr_tail(10));
    }
    out
}

struct Observed {
    wall: Duration,
    killed: Option<String>,
    drop_seconds: Option<f64>,
    cleanup_seconds: Option<f64>,
    dropped: Vec<String>,
}

pub fn run_scenario(cfg: &ScenarioConfig, bins: &Binaries) -> Result<ScenarioReport, HarnessError> {
    execute(cfg, bins, None)
}

/// Runs the scenario with `fault` active.
pub fn fault_inject(cfg: &ScenarioConfig, bins: &Binaries, fault: &Fault) -> Result<ScenarioReport, HarnessError> {
    execute(cfg, bins, Some(fault))
}

fn execute(cfg: &ScenarioConfig, bins: &Binaries, fault: Option<&Fault>) -> Result<ScenarioReport, HarnessError> {
    cfg.validate()?;
    if let Some(f) = fault {
        f.validate(cfg)?;
    }
    let layout = Layout::new(&cfg.out);
    let apps = prepare(cfg, &layout)?;
    let tracker = Proc::spawn("tracker", &bins.tracker, &tracker_args(cfg, &layout), &layout.tracker_dir())?;
    let mut procs = vec![tracker];
    for node in &cfg.roster {
        let args = agent_args(cfg, &layout, &apps, node, &procs[0], fault);
        procs.push(Proc::spawn(&node.name, &bins.agent, &args, &layout.node_dir(&node.name))?);
    }
    let observed = supervise(cfg, &layout, &apps, &mut procs, fault);
    drop(procs);
    let observed = observed?;
    build_report(cfg, &layout, &apps, observed)
}

fn supervise(cfg: &ScenarioConfig, layout: &Layout, apps: &[App], procs: &mut [Proc], fault: Option<&Fault>) -> Result<Observed, HarnessError> {
    let started = Instant::now();
    let total: usize = apps.iter().map(|a| a.range.parts as usize).sum();
    let target = fault.and_then(|f| {
        let (Fault::KillLeecher { node, .. } | Fault::CorruptResult { node, .. } | Fault::MuteSeeder { node, .. }) = f;
        procs.iter().position(|p| p.name == *node)
    });
    let mut killed: Option<usize> = None;
    let mut muted: Option<(usize, Instant)> = None;
    let mut dropped_at: Option<Instant> = None;
    let mut progress = (0usize, Instant::now());
    let mute_limit = cfg.ping_interval * (cfg.max_misses + 5) + Duration::from_secs(30);

    loop {
        thread::sleep(POLL);
        for (i, p) in procs.iter_mut().enumerate() {
            if Some(i) != killed && !p.alive() {
                return Err(HarnessError::Spawn(format!("{} exited unexpectedly:\n{}", p.name, p.stderr_tail(20))));
            }
        }

        match fault {
            Some(Fault::KillLeecher { at_part, .. }) if killed.is_none() => {
                let victim = target.expect("validated node");
                let id = procs[victim].node.to_string();
                let hit = apps.iter().any(|a| {
                    layout.tracker_log(&a.seeder, &a.id).iter().any(|(_, l)| {
                        matches!(l, TrackerLine::Assign { part, node, .. } if *part >= *at_part && *node == id)
                    })
                });
                if hit {
                    procs[victim].kill();
                    killed = Some(victim);
                }
            }
            Some(Fault::MuteSeeder { after, .. }) if muted.is_none() && started.elapsed() >= *after => {
                let victim = target.expect("validated node");
                procs[victim].mute()?;
                muted = Some((victim, Instant::now()));
            }
            _ => {}
        }

        if let Some((victim, at)) = muted {
            let seeded: Vec<&App> = apps.iter().filter(|a| a.seeder == procs[victim].name).collect();
            if dropped_at.is_none() {
                let host = procs[victim].node;
                let listed = layout.published();
                if !listed.iter().any(|a| a.host == host && seeded.iter().any(|s| s.id == a.app)) {
                    dropped_at = Some(Instant::now());
                }
            }
            if let Some(dropped) = dropped_at {
                let copies = cfg.roster.iter().filter(|n| n.name != procs[victim].name).any(|n| {
                    let store = layout.leech_store(&n.name);
                    seeded.iter().any(|a| store.app_dir(&a.id).exists())
                });
                if !copies {
                    return Ok(Observed {
                        wall: started.elapsed(),
                        killed: None,
                        drop_seconds: Some((dropped - at).as_secs_f64()),
                        cleanup_seconds: Some(dropped.elapsed().as_secs_f64()),
                        dropped: seeded.iter().map(|a| a.label.clone()).collect(),
                    });
                }
            }
            if at.elapsed() > mute_limit {
                return Ok(Observed {
                    wall: started.elapsed(),
                    killed: None,
                    drop_seconds: dropped_at.map(|d| (d - at).as_secs_f64()),
                    cleanup_seconds: None,
                    dropped: if dropped_at.is_some() { seeded.iter().map(|a| a.label.clone()).collect() } else { vec![] },
                });
            }
            continue;
        }

        let accepted = accepted_count(layout, apps);
        if accepted != progress.0 {
            progress = (accepted, Instant::now());
        } else if progress.1.elapsed() > cfg.watchdog() {
            let why = format!("no part accepted for {:?}", cfg.watchdog());
            return Err(HarnessError::Watchdog(dump(procs, &why, accepted)));
        }
        if accepted == total {
            let published = layout.published();
            let done = apps.iter().all(|a| published.iter().any(|p| p.app == a.id && p.parts_remaining == 0));
            if done {
                let wall = started.elapsed();
                let until = Instant::now() + SETTLE;
                while !settled(cfg, layout, apps) && Instant::now() < until {
                    thread::sleep(POLL);
                }
                let killed = killed.map(|i| procs[i].name.clone());
                return Ok(Observed { wall, killed, drop_seconds: None, cleanup_seconds: None, dropped: vec![] });
            }
        }
    }
}

fn build_report(cfg: &ScenarioConfig, layout: &Layout, apps: &[App], obs: Observed) -> Result<ScenarioReport, HarnessError> {
    let mut report = ScenarioReport {
        scenario: cfg.kind.to_string(),
        scale: cfg.scale,
        wall_seconds: obs.wall.as_secs_f64(),
        ..ScenarioReport::default()
    };
    for (i, node) in cfg.roster.iter().enumerate() {
        let events = layout.events(&node.name);
        for (j, app) in apps.iter().enumerate() {
            if !cfg.roster[i].leech.wants(j) {
                continue;
            }
            report.clients.push(client_row(&node.name, app, &events));
        }
    }
    let published = layout.published();
    let mut faults = FaultOutcome {
        killed: obs.killed,
        dropped: obs.dropped,
        drop_seconds: obs.drop_seconds,
        cleanup_seconds: obs.cleanup_seconds,
        ..FaultOutcome::default()
    };
    for app in apps {
        let seeded = layout.seed_store(&app.seeder);
        let accepted = seeded.accepted_parts(&app.id).map_or(0, |p| p.len() as u32);
        let mut row = AppRow { app: app.label.clone(), id: app.id.to_string(), parts: app.range.parts, accepted, ..AppRow::default() };
        if let Some(a) = published.iter().find(|a| a.app == app.id) {
            (row.p, row.w, row.d) = (a.metrics.p, a.metrics.w, a.metrics.d);
        }
        report.apps.push(row);
        for (_, line) in layout.tracker_log(&app.seeder, &app.id) {
            match line {
                TrackerLine::Reissue { .. } => faults.reissued += 1,
                TrackerLine::Reject { .. } => faults.rejected += 1,
                TrackerLine::Exhausted { .. } => faults.exhausted += 1,
                _ => {}
            }
        }
    }
    report.faults = faults;
    if cfg.baseline {
        let (seconds, primes) = sequential_baseline(cfg)?;
        report.baseline_seconds = Some(seconds);
        let mut matches = true;
        for (app, expected) in apps.iter().zip(&primes) {
            matches &= accepted_primes(layout, &app.seeder, &app.id, app.range.parts).is_ok_and(|p| p == *expected);
        }
        report.baseline_matches = Some(matches);
    }
    Ok(report)
}

fn client_row(client: &str, app: &App, events: &[EventRecord]) -> ClientRow {
    let id = app.id.to_string();
    let mine: Vec<&EventRecord> = events.iter().filter(|e| e.app.as_deref() == Some(id.as_str())).collect();
    let of = |name: &'static str| mine.iter().copied().filter(move |e| e.event == name);
    let cycles: Vec<&EventRecord> = of("cycle").collect();
    let first = of("recv").map(|e| e.ts).fold(f64::INFINITY, f64::min);
    let last = cycles.iter().map(|e| e.ts).fold(f64::NEG_INFINITY, f64::max);
    let worked: f64 = cycles.iter().filter_map(|e| e.seconds).sum();
    ClientRow {
        client: client.to_string(),
        app: app.label.clone(),
        cycles: cycles.len() as u64,
        seconds: if last >= first { last - first } else { 0.0 },
        avg_seconds: if cycles.is_empty() { 0.0 } else { worked / cycles.len() as f64 },
        bytes: of("recv").filter_map(|e| e.bytes).sum(),
        reported_bytes: cycles.iter().filter_map(|e| e.bytes).sum(),
    }
}

/// Union of the accepted payloads of `app`, in part order.
pub fn accepted_primes(layout: &Layout, seeder: &str, app: &AppId, parts: u32) -> Result<Vec<u64>, HarnessError> {
    let store = layout.seed_store(seeder);
    let mut out = Vec::new();
    for part in 0..parts {
        let payload = store.read_result(app, part)?;
        out.extend(parse_payload(&payload).map_err(|e| HarnessError::Report(format!("part {part}: {e}")))?);
    }
    Ok(out)
}

/// Every part of every app searched one after another in this process.
/// Returns the elapsed seconds and the primes per app.
pub fn sequential_baseline(cfg: &ScenarioConfig) -> Result<(f64, Vec<Vec<u64>>), HarnessError> {
    let never = AtomicBool::new(false);
    let started = Instant::now();
    let mut all = Vec::new();
    for a in &cfg.apps {
        let units = partition_range(&a.scaled(cfg.scale)?).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut primes = Vec::new();
        for u in &units {
            let payload = run_prime_search(&encode_data_part(u), &never).map_err(|e| HarnessError::Report(e.to_string()))?;
            primes.extend(parse_payload(&payload).map_err(|e| HarnessError::Report(e.to_string()))?);
        }
        all.push(primes);
    }
    Ok((started.elapsed().as_secs_f64(), all))
}
