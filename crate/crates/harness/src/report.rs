//! Scenario reports: per-client cycle counts, times and transfer sizes,
//! per-app published metrics, and fault outcomes. Rendered either as a
//! table or as one `key value` line per cell.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::HarnessError;

/// One client's work on one application.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientRow {
    pub client: String,
    pub app: String,
    /// Acknowledged cycles.
    pub cycles: u64,
    /// First receipt to last acknowledgement, in seconds.
    pub seconds: f64,
    /// Mean working time per acknowledged cycle.
    pub avg_seconds: f64,
    /// Bytes received on the wire (application files plus data parts).
    pub bytes: u64,
    /// Sum of the `d` values the client reported with its results.
    pub reported_bytes: u64,
}

/// What the tracker published for one application at the end of the run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppRow {
    pub app: String,
    pub id: String,
    pub parts: u32,
    pub accepted: u32,
    pub p: u64,
    pub w: Option<f64>,
    pub d: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultOutcome {
    pub reissued: u64,
    pub rejected: u64,
    pub exhausted: u64,
    /// Client killed during the run.
    pub killed: Option<String>,
    /// Apps that left the tracker's list during the run.
    pub dropped: Vec<String>,
    /// Mute to removal from the list.
    pub drop_seconds: Option<f64>,
    /// Removal from the list to the last leecher deleting its copy.
    pub cleanup_seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioReport {
    pub scenario: String,
    pub scale: f64,
    pub clients: Vec<ClientRow>,
    pub apps: Vec<AppRow>,
    pub wall_seconds: f64,
    pub baseline_seconds: Option<f64>,
    /// Whether the sequential run found exactly the accepted primes.
    pub baseline_matches: Option<bool>,
    pub faults: FaultOutcome,
}

impl ScenarioReport {
    pub fn speedup(&self) -> Option<f64> {
        self.baseline_seconds.filter(|_| self.wall_seconds > 0.0).map(|b| b / self.wall_seconds)
    }

    /// Total acknowledged cycles for `app` across clients.
    pub fn cycles(&self, app: &str) -> u64 {
        self.clients.iter().filter(|c| c.app == app).map(|c| c.cycles).sum()
    }

    pub fn client(&self, client: &str, app: &str) -> Option<&ClientRow> {
        self.clients.iter().find(|c| c.client == client && c.app == app)
    }

    pub fn app(&self, app: &str) -> Option<&AppRow> {
        self.apps.iter().find(|a| a.app == app)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Rows,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Format::Table),
            "rows" => Ok(Format::Rows),
            other => Err(format!("unknown report format {other:?}; expected table or rows")),
        }
    }
}

pub fn emit_report(report: &ScenarioReport, format: Format) -> String {
    match format {
        Format::Table => table(report),
        Format::Rows => rows(report),
    }
}

const MB: f64 = 1e6;

fn table(r: &ScenarioReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Scenario {} (scale {})", r.scenario, r.scale);
    let _ = writeln!(out, "{:<8} {:<6} {:>10} {:>10} {:>10} {:>10}", "Client", "App", "# of cycle", "Time (h)", "Avg (s)", "Size (MB)");
    for c in &r.clients {
        let _ = writeln!(
            out,
            "{:<8} {:<6} {:>10} {:>10.4} {:>10.4} {:>10.2}",
            c.client,
            c.app,
            c.cycles,
            c.seconds / 3600.0,
            c.avg_seconds,
            c.bytes as f64 / MB
        );
    }
    if r.apps.is_empty() {
        return out;
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<6} {:>8} {:>8} {:>10} {:>10}", "App", "Parts", "p", "w (s)", "d (MB)");
    for a in &r.apps {
        let w = a.w.map_or_else(|| "-".to_string(), |w| format!("{w:.4}"));
        let _ = writeln!(out, "{:<6} {:>8} {:>8} {:>10} {:>10.2}", a.app, a.parts, a.p, w, a.d as f64 / MB);
    }
    let _ = writeln!(out);
    let _ = write!(out, "Wall {:.2} s", r.wall_seconds);
    if let Some(b) = r.baseline_seconds {
        let _ = write!(out, "; sequential {b:.2} s; speedup {:.2}", r.speedup().unwrap_or(0.0));
    }
    if let Some(m) = r.baseline_matches {
        let _ = write!(out, "; results {}", if m { "match" } else { "DIFFER" });
    }
    let _ = writeln!(out);
    let f = &r.faults;
    if *f != FaultOutcome::default() {
        let _ = write!(out, "Faults: {} reissued, {} rejected, {} exhausted", f.reissued, f.rejected, f.exhausted);
        if let Some(k) = &f.killed {
            let _ = write!(out, "; killed {k}");
        }
        if !f.dropped.is_empty() {
            let _ = write!(out, "; dropped {}", f.dropped.join(","));
        }
        let _ = writeln!(out);
    }
    out
}

fn rows(r: &ScenarioReport) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("scenario {}", r.scenario));
    line(format!("scale {}", r.scale));
    line(format!("wall_seconds {}", r.wall_seconds));
    if let Some(b) = r.baseline_seconds {
        line(format!("baseline_seconds {b}"));
    }
    if let Some(m) = r.baseline_matches {
        line(format!("baseline_matches {m}"));
    }
    for a in &r.apps {
        line(format!("app {} id {}", a.app, a.id));
        line(format!("app {} parts {}", a.app, a.parts));
        line(format!("app {} accepted {}", a.app, a.accepted));
        line(format!("app {} p {}", a.app, a.p));
        if let Some(w) = a.w {
            line(format!("app {} w {w}", a.app));
        }
        line(format!("app {} d {}", a.app, a.d));
    }
    for c in &r.clients {
        let key = format!("client {} {}", c.client, c.app);
        line(format!("{key} cycles {}", c.cycles));
        line(format!("{key} seconds {}", c.seconds));
        line(format!("{key} avg {}", c.avg_seconds));
        line(format!("{key} bytes {}", c.bytes));
        line(format!("{key} reported {}", c.reported_bytes));
    }
    let f = &r.faults;
    line(format!("fault reissued {}", f.reissued));
    line(format!("fault rejected {}", f.rejected));
    line(format!("fault exhausted {}", f.exhausted));
    if let Some(k) = &f.killed {
        line(format!("fault killed {k}"));
    }
    for d in &f.dropped {
        line(format!("fault dropped {d}"));
    }
    if let Some(s) = f.drop_seconds {
        line(format!("fault drop_seconds {s}"));
    }
    if let Some(s) = f.cleanup_seconds {
        line(format!("fault cleanup_seconds {s}"));
    }
    out
}

fn num<T: FromStr>(v: &str, line: &str) -> Result<T, HarnessError> {
    v.parse().map_err(|_| HarnessError::Report(format!("bad value in {line:?}")))
}

/// Inverse of the `rows` format.
pub fn parse_rows(text: &str) -> Result<ScenarioReport, HarnessError> {
    let mut r = ScenarioReport::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let w: Vec<&str> = line.split_whitespace().collect();
        let bad = || HarnessError::Report(format!("unrecognised row {line:?}"));
        match w.as_slice() {
            ["scenario"] => r.scenario.clear(),
            ["scenario", v] => r.scenario = v.to_string(),
            ["scale", v] => r.scale = num(v, line)?,
            ["wall_seconds", v] => r.wall_seconds = num(v, line)?,
            ["baseline_seconds", v] => r.baseline_seconds = Some(num(v, line)?),
            ["baseline_matches", v] => r.baseline_matches = Some(num(v, line)?),
            ["app", app, field, v] => {
                let row = match r.apps.iter().position(|a| a.app == *app) {
                    Some(i) => &mut r.apps[i],
                    None => {
                        r.apps.push(AppRow { app: app.to_string(), ..AppRow::default() });
                        r.apps.last_mut().unwrap()
                    }
                };
                match *field {
                    "id" => row.id = v.to_string(),
                    "parts" => row.parts = num(v, line)?,
                    "accepted" => row.accepted = num(v, line)?,
                    "p" => row.p = num(v, line)?,
                    "w" => row.w = Some(num(v, line)?),
                    "d" => row.d = num(v, line)?,
                    _ => return Err(bad()),
                }
            }
            ["client", client, app, field, v] => {
                let row = match r.clients.iter().position(|c| c.client == *client && c.app == *app) {
                    Some(i) => &mut r.clients[i],
                    None => {
                        r.clients.push(ClientRow { client: client.to_string(), app: app.to_string(), ..ClientRow::default() });
                        r.clients.last_mut().unwrap()
                    }
                };
                match *field {
                    "cycles" => row.cycles = num(v, line)?,
                    "seconds" => row.seconds = num(v, line)?,
                    "avg" => row.avg_seconds = num(v, line)?,
                    "bytes" => row.bytes = num(v, line)?,
                    "reported" => row.reported_bytes = num(v, line)?,
                    _ => return Err(bad()),
                }
            }
            ["fault", field, v] => {
                let f = &mut r.faults;
                match *field {
                    "reissued" => f.reissued = num(v, line)?,
                    "rejected" => f.rejected = num(v, line)?,
                    "exhausted" => f.exhausted = num(v, line)?,
                    "killed" => f.killed = Some(v.to_string()),
                    "dropped" => f.dropped.push(v.to_string()),
                    "drop_seconds" => f.drop_seconds = Some(num(v, line)?),
                    "cleanup_seconds" => f.cleanup_seconds = Some(num(v, line)?),
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        }
    }
    Ok(r)
}
