//! Acceptance gate. Runs every criterion at its stated scale and tolerance
//! and prints one PASS, FAIL or SKIP line for each; exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{rngs::StdRng, Rng, SeedableRng};
use vc_agent::store::TrackerLine;
use vc_core::metrics::{avg_working_time, RunLog};
use vc_core::protocol::{AppId, NodeId};
use vc_core::workloads::{encode_data_part, partition_range, sieve_oracle, PRIME_APP_FILE_SIZE};
use vc_harness::run::accepted_primes;
use vc_harness::{fault_inject, run_scenario, Binaries, Fault, Layout, NodeSpec, ScenarioConfig, ScenarioKind, ScenarioReport};

type Verdict = Result<String, String>;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn bins() -> Binaries {
    Binaries { tracker: PathBuf::from(env!("CARGO_BIN_EXE_tracker")), agent: PathBuf::from(env!("CARGO_BIN_EXE_agent")) }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle(lo: u64, hi: u64) -> Vec<u64> {
    sieve_oracle(hi).into_iter().filter(|&p| p >= lo).collect()
}

fn preset(kind: ScenarioKind, scale: f64, out: &Path) -> ScenarioConfig {
    ScenarioConfig::preset(kind, scale, out).expect("preset")
}

fn node_id(layout: &Layout, name: &str) -> NodeId {
    std::fs::read_to_string(layout.node_dir(name).join("node_id")).expect("node id").trim().parse().expect("node id")
}

fn sum_events(layout: &Layout, node: &str, app: &AppId, event: &str) -> (u64, u64) {
    let id = app.to_string();
    layout
        .events(node)
        .iter()
        .filter(|e| e.event == event && e.app.as_deref() == Some(id.as_str()))
        .fold((0, 0), |(n, b), e| (n + 1, b + e.bytes.unwrap_or(0)))
}

/// Full-scale Scenario I, shared by the first three criteria.
struct ScenarioOne {
    cfg: ScenarioConfig,
    report: ScenarioReport,
}

fn work_conservation(run: &Result<ScenarioOne, String>) -> Verdict {
    let ScenarioOne { cfg, report } = run.as_ref().map_err(Clone::clone)?;
    let layout = Layout::new(&cfg.out);
    let app = layout.app_id("app1").map_err(|e| e.to_string())?;
    let x = report.client("X", "app1").map_or(0, |c| c.cycles);
    let y = report.client("Y", "app1").map_or(0, |c| c.cycles);
    ensure(x + y == 2059, || format!("cycles {x} + {y} != 2059"))?;
    let found = accepted_primes(&layout, "S", &app, 2059).map_err(|e| e.to_string())?;
    let expected = oracle(3, 2_000_000);
    ensure(found == expected, || format!("union has {} primes, oracle {}", found.len(), expected.len()))?;
    Ok(format!("cycles {x} + {y} = 2059; {} primes equal the sieve", found.len()))
}

fn transfer_accounting(run: &Result<ScenarioOne, String>) -> Verdict {
    let ScenarioOne { cfg, report } = run.as_ref().map_err(Clone::clone)?;
    let layout = Layout::new(&cfg.out);
    let app = layout.app_id("app1").map_err(|e| e.to_string())?;
    let spec = cfg.apps[0].scaled(cfg.scale).map_err(|e| e.to_string())?;
    let data: u64 = partition_range(&spec).unwrap().iter().map(|u| encode_data_part(u).len() as u64).sum();
    let mut detail = Vec::new();
    for client in ["X", "Y"] {
        let row = report.client(client, "app1").ok_or_else(|| format!("no row for {client}"))?;
        let (_, wire) = sum_events(&layout, client, &app, "recv");
        ensure(row.bytes == wire, || format!("{client}: report {} != wire log {wire}", row.bytes))?;
        ensure(row.reported_bytes == wire, || format!("{client}: reported d {} != wire log {wire}", row.reported_bytes))?;
        let share = row.cycles as f64 / spec.parts as f64 * data as f64;
        let model = row.cycles as f64 * PRIME_APP_FILE_SIZE as f64 + share;
        let err = (wire as f64 - model).abs() / model;
        ensure(err <= 0.05, || format!("{client}: {wire} B is {:.2}% from the model {model:.0} B", err * 100.0))?;
        detail.push(format!("{client} {:.2} MB ({:.3}% off model)", wire as f64 / 1e6, err * 100.0));
    }
    Ok(detail.join(", "))
}

fn published_metrics(run: &Result<ScenarioOne, String>) -> Verdict {
    let ScenarioOne { cfg, report } = run.as_ref().map_err(Clone::clone)?;
    let layout = Layout::new(&cfg.out);
    let app = layout.app_id("app1").map_err(|e| e.to_string())?;
    let row = report.app("app1").ok_or("no app row")?;
    ensure(row.p == 2059, || format!("published p = {}", row.p))?;
    let published = row.w.ok_or("w not published")?;
    let id = app.to_string();
    let mut log = RunLog::new();
    for client in ["X", "Y"] {
        let node = node_id(&layout, client);
        for e in layout.events(client).iter().filter(|e| e.event == "cycle" && e.app.as_deref() == Some(id.as_str())) {
            log.push(node, e.seconds.ok_or("cycle without seconds")?);
        }
    }
    let recomputed = avg_working_time(&log).map_err(|e| e.to_string())?;
    let rel = (published - recomputed).abs() / recomputed.abs().max(f64::MIN_POSITIVE);
    ensure(rel <= 1e-9, || format!("published w {published} vs event log {recomputed} (rel {rel:e})"))?;
    Ok(format!("p = 2059, w = {published:.6} s matches the event log (rel {rel:.1e})"))
}

fn part_totals(root: &Path) -> Verdict {
    let mut detail = Vec::new();
    for kind in [ScenarioKind::II, ScenarioKind::IV] {
        let cfg = preset(kind, 1.0, &root.join(format!("c4-{kind}")));
        let report = run_scenario(&cfg, &bins()).map_err(|e| format!("scenario {kind}: {e}"))?;
        let (a, b) = (report.cycles("app1"), report.cycles("app2"));
        let leechers = cfg.roster.iter().filter(|n| n.leech != vc_harness::Leech::None).count();
        ensure(a == 2059 && b == 1080, || format!("scenario {kind}: app1 {a}, app2 {b}"))?;
        detail.push(format!("{kind} ({leechers} leechers): 2059 / 1080"));
    }
    Ok(detail.join("; "))
}

fn liveness_expiry(root: &Path) -> Verdict {
    let mut cfg = preset(ScenarioKind::I, 1.0, &root.join("c5"));
    cfg.ping_interval = Duration::from_secs(2);
    cfg.max_misses = 3;
    cfg.cache_app = true;
    let fault = Fault::MuteSeeder { node: "S".into(), after: Duration::from_millis(1500) };
    let report = fault_inject(&cfg, &bins(), &fault).map_err(|e| e.to_string())?;
    let layout = Layout::new(&cfg.out);
    let app = layout.app_id("app1").map_err(|e| e.to_string())?;
    let f = &report.faults;
    let dropped = f.drop_seconds.ok_or("app never left the list")?;
    ensure(dropped <= 10.0, || format!("app removed {dropped:.2} s after the mute"))?;
    let cleanup = f.cleanup_seconds.ok_or("leecher copies were never removed")?;
    let push = cfg.push_interval.as_secs_f64();
    ensure(cleanup <= push, || format!("copies removed {cleanup:.3} s after the drop; push interval {push} s"))?;
    for client in ["X", "Y"] {
        ensure(sum_events(&layout, client, &app, "recv").0 > 0, || format!("{client} never held a copy"))?;
        let dir = layout.leech_store(client).app_dir(&app);
        ensure(!dir.exists(), || format!("{} still exists", dir.display()))?;
    }
    Ok(format!("dropped after {dropped:.2} s, Leech/<AppId> gone {cleanup:.3} s later"))
}

fn majority_voting(root: &Path) -> Verdict {
    let mut cfg = preset(ScenarioKind::I, 0.01, &root.join("c6"));
    cfg.roster.push(NodeSpec::leecher("Z"));
    cfg.m_min = 3;
    cfg.m_max = 3;
    let spec = cfg.apps[0].scaled(cfg.scale).map_err(|e| e.to_string())?;
    ensure((spec.lo, spec.hi, spec.parts) == (3, 20_000, 21), || format!("desk range {spec:?}"))?;
    let fault = Fault::CorruptResult { node: "Z".into(), rate: 1.0, seed: 7 };
    let report = fault_inject(&cfg, &bins(), &fault).map_err(|e| e.to_string())?;
    let layout = Layout::new(&cfg.out);
    let app = layout.app_id("app1").map_err(|e| e.to_string())?;
    let store = layout.seed_store("S");
    for unit in partition_range(&spec).unwrap() {
        let expected: String = oracle(unit.lo, unit.hi).iter().map(|p| format!("{p}\n")).collect();
        let got = store.read_result(&app, unit.index).map_err(|e| format!("part {}: {e}", unit.index))?;
        ensure(got == expected.as_bytes(), || format!("part {} accepted a wrong payload", unit.index))?;
    }
    let z = node_id(&layout, "Z").to_string();
    let log = layout.tracker_log("S", &app);
    let rejected = log.iter().filter(|(_, l)| matches!(l, TrackerLine::Reject { node, .. } if *node == z)).count();
    let accepted = log.iter().filter(|(_, l)| matches!(l, TrackerLine::Accept { node, .. } if *node == z)).count();
    let submitted = sum_events(&layout, "Z", &app, "cycle").0 + sum_events(&layout, "Z", &app, "rejected").0;
    ensure(submitted > 0, || "the corrupting leecher submitted nothing".into())?;
    ensure(accepted == 0, || format!("{accepted} corrupted records represent accepted parts"))?;
    ensure(rejected as u64 == submitted, || format!("{rejected} of {submitted} corrupted records rejected"))?;
    Ok(format!("21/21 parts oracle-correct; {rejected}/{submitted} corrupted records rejected; {} accepted", report.apps[0].accepted))
}

fn churn(root: &Path) -> Verdict {
    let mut detail = Vec::new();
    for trial in 0..10u64 {
        let mut cfg = preset(ScenarioKind::I, 0.05, &root.join(format!("c7-{trial}")));
        cfg.roster.push(NodeSpec::leecher("Z"));
        cfg.work_timeout = 1.0;
        let spec = cfg.apps[0].scaled(cfg.scale).map_err(|e| e.to_string())?;
        let mut rng = StdRng::seed_from_u64(trial);
        let victim = ["X", "Y", "Z"][rng.gen_range(0..3)];
        let at_part = rng.gen_range(0..spec.parts / 2);
        let fault = Fault::KillLeecher { node: victim.into(), at_part };
        let report = fault_inject(&cfg, &bins(), &fault).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(report.faults.killed.as_deref() == Some(victim), || format!("trial {trial}: {victim} was not killed"))?;
        let layout = Layout::new(&cfg.out);
        let app = layout.app_id("app1").map_err(|e| e.to_string())?;
        let found = accepted_primes(&layout, "S", &app, spec.parts).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(found == oracle(spec.lo, spec.hi), || format!("trial {trial}: accepted set differs from the oracle"))?;
        // Parts the victim held when it died must have been handed out again.
        let id = node_id(&layout, victim).to_string();
        let mut held: BTreeMap<u32, bool> = BTreeMap::new();
        for (_, line) in layout.tracker_log("S", &app) {
            match line {
                TrackerLine::Assign { part, node, .. } if node == id => {
                    held.insert(part, true);
                }
                TrackerLine::Accept { part, node, .. } | TrackerLine::Reject { part, node, .. } | TrackerLine::Reissue { part, node }
                    if node == id =>
                {
                    held.insert(part, false);
                }
                _ => {}
            }
        }
        let orphaned: Vec<u32> = held.into_iter().filter(|&(_, h)| h).map(|(p, _)| p).collect();
        ensure(orphaned.is_empty(), || format!("trial {trial}: parts {orphaned:?} held by {victim} were never reissued"))?;
        detail.push(format!("{victim}@{at_part}:{}r", report.faults.reissued));
    }
    Ok(format!("10/10 trials equal the oracle ({})", detail.join(" ")))
}

fn speedup(root: &Path) -> Outcome {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads < 4 {
        return Outcome::Skip(format!("{threads} hardware thread(s); the floors need at least 4"));
    }
    let run = || -> Verdict {
        let mut one = preset(ScenarioKind::I, 1.0, &root.join("c8-I"));
        one.baseline = true;
        let r = run_scenario(&one, &bins()).map_err(|e| e.to_string())?;
        let ratio = r.wall_seconds / r.baseline_seconds.unwrap_or(f64::NAN);
        ensure(ratio <= 0.8, || format!("scenario I took {ratio:.2}x the sequential time"))?;
        let mut four = preset(ScenarioKind::IV, 1.0, &root.join("c8-IV"));
        four.roster.truncate(4);
        four.baseline = true;
        let r4 = run_scenario(&four, &bins()).map_err(|e| e.to_string())?;
        let ratio4 = r4.wall_seconds / r4.baseline_seconds.unwrap_or(f64::NAN);
        ensure(ratio4 <= 0.5, || format!("four-leecher run took {ratio4:.2}x the sequential time"))?;
        Ok(format!("I {ratio:.2}x, IV-shaped {ratio4:.2}x of sequential"))
    };
    outcome(run())
}

fn property_suites() -> Verdict {
    use vc_core::props;
    props::protocol_round_trip(10_000).map_err(|e| format!("protocol round trip: {e}"))?;
    props::partition_soundness(1_000).map_err(|e| format!("partition: {e}"))?;
    props::primes_match_sieve(1_000).map_err(|e| format!("find_primes: {e}"))?;
    props::metric_invariants(1_000).map_err(|e| format!("metrics: {e}"))?;
    Ok("10k round trips, 1k partitions, 1k prime subranges, metric invariants".into())
}

fn outcome(v: Verdict) -> Outcome {
    match v {
        Ok(d) => Outcome::Pass(d),
        Err(e) => Outcome::Fail(e),
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    let one = {
        let cfg = preset(ScenarioKind::I, 1.0, &root.join("c1"));
        run_scenario(&cfg, &bins()).map(|report| ScenarioOne { cfg, report }).map_err(|e| e.to_string())
    };
    results.push((1, "Scenario I work conservation", outcome(work_conservation(&one))));
    results.push((2, "Scenario I transfer accounting", outcome(transfer_accounting(&one))));
    results.push((3, "published metrics oracle", outcome(published_metrics(&one))));
    results.push((4, "Scenario II/IV part totals", outcome(part_totals(root))));
    results.push((5, "liveness expiry", outcome(liveness_expiry(root))));
    results.push((6, "majority voting", outcome(majority_voting(root))));
    results.push((7, "churn robustness", outcome(churn(root))));
    results.push((8, "soft speedup", speedup(root)));
    results.push((9, "property suites", outcome(property_suites())));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n} [{tag}] {name}: {detail}");
    }
    println!("acceptance: {} criteria, {failed} failed, {:.0} s", results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
