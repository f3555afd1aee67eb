//! On-disk layout of an agent data directory:
//!
//! ```text
//! Seed/<AppId>/app             Leech/<AppId>/app
//! Seed/<AppId>/Data/<i>        Leech/<AppId>/Data/<i>
//! Seed/<AppId>/Data/Tracker    Leech/<AppId>/Data/Time
//! Seed/<AppId>/result/<i>      Leech/<AppId>/result/<i>
//! ```
//!
//! The seed tree is persistent; everything under `Leech/` is temporary.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use vc_core::persist::atomic_write;
use vc_core::protocol::AppId;
use vc_core::workloads::{encode_data_part, WorkUnit};

pub const SEED_DIR: &str = "Seed";
pub const LEECH_DIR: &str = "Leech";
pub const TRACKER_LOG: &str = "Tracker";
pub const TIME_LOG: &str = "Time";

fn append_line(path: &Path, line: &str) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{line}\n").as_bytes())
}

/// Numeric file names in `dir`, ascending. Missing dir yields nothing.
fn numbered_files(dir: &Path) -> io::Result<Vec<u32>> {
    let mut out = Vec::new();
    match fs::read_dir(dir) {
        Ok(entries) => {
            for e in entries {
                if let Some(i) = e?.file_name().to_str().and_then(|n| n.parse().ok()) {
                    out.push(i);
                }
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e),
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SeedStore {
    root: PathBuf,
}

impl SeedStore {
    pub fn new(data_dir: &Path) -> Self {
        SeedStore { root: data_dir.join(SEED_DIR) }
    }

    pub fn app_dir(&self, app: &AppId) -> PathBuf {
        self.root.join(app.to_string())
    }

    pub fn exists(&self, app: &AppId) -> bool {
        self.app_dir(app).join("app").is_file()
    }

    /// Writes the app file and one data file per unit, unless the app is
    /// already installed (restart).
    pub fn install(&self, app_bytes: &[u8], units: &[WorkUnit]) -> io::Result<AppId> {
        let app = AppId::of(app_bytes);
        if self.exists(&app) {
            return Ok(app);
        }
        let dir = self.app_dir(&app);
        fs::create_dir_all(dir.join("Data"))?;
        fs::create_dir_all(dir.join("result"))?;
        for unit in units {
            atomic_write(&dir.join("Data").join(unit.index.to_string()), &encode_data_part(unit))?;
        }
        // The app file goes last: its presence marks a complete install.
        atomic_write(&dir.join("app"), app_bytes)?;
        Ok(app)
    }

    pub fn read_app(&self, app: &AppId) -> io::Result<Vec<u8>> {
        fs::read(self.app_dir(app).join("app"))
    }

    pub fn read_part(&self, app: &AppId, part: u32) -> io::Result<Vec<u8>> {
        fs::read(self.app_dir(app).join("Data").join(part.to_string()))
    }

    pub fn parts(&self, app: &AppId) -> io::Result<Vec<u32>> {
        numbered_files(&self.app_dir(app).join("Data"))
    }

    pub fn save_result(&self, app: &AppId, part: u32, payload: &[u8]) -> io::Result<()> {
        atomic_write(&self.app_dir(app).join("result").join(part.to_string()), payload)
    }

    pub fn read_result(&self, app: &AppId, part: u32) -> io::Result<Vec<u8>> {
        fs::read(self.app_dir(app).join("result").join(part.to_string()))
    }

    pub fn accepted_parts(&self, app: &AppId) -> io::Result<Vec<u32>> {
        numbered_files(&self.app_dir(app).join("result"))
    }

    pub fn tracker_log_path(&self, app: &AppId) -> PathBuf {
        self.app_dir(app).join("Data").join(TRACKER_LOG)
    }

    pub fn log_tracker(&self, app: &AppId, line: &str) -> io::Result<()> {
        append_line(&self.tracker_log_path(app), line)
    }

    /// Every installed app id.
    pub fn apps(&self) -> io::Result<Vec<AppId>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e),
        };
        for e in entries {
            if let Some(id) = e?.file_name().to_str().and_then(|n| n.parse().ok()) {
                if self.exists(&id) {
                    out.push(id);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Tracker log line written by the seeder, one per assignment, reissue,
/// vote outcome or acceptance.
#[derive(Debug, Clone, PartialEq)]
pub enum TrackerLine {
    Assign { part: u32, node: String, deadline: f64 },
    Reissue { part: u32, node: String },
    Reject { part: u32, node: String, reason: String },
    Exhausted { part: u32 },
    Accept { part: u32, node: String, bytes: u64, app_bytes: u64, seconds: f64 },
}

impl TrackerLine {
    pub fn render(&self, ts: f64) -> String {
        match self {
            TrackerLine::Assign { part, node, deadline } => format!("{ts:.6} assign {part} {node} {deadline:.6}"),
            TrackerLine::Reissue { part, node } => format!("{ts:.6} reissue {part} {node}"),
            TrackerLine::Reject { part, node, reason } => format!("{ts:.6} reject {part} {node} {reason}"),
            TrackerLine::Exhausted { part } => format!("{ts:.6} exhausted {part}"),
            TrackerLine::Accept { part, node, bytes, app_bytes, seconds } => {
                format!("{ts:.6} accept {part} {node} {bytes} {app_bytes} {seconds:?}")
            }
        }
    }

    /// Parses a rendered line back, returning its timestamp too.
    pub fn parse(line: &str) -> Option<(f64, TrackerLine)> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let ts = f.first()?.parse().ok()?;
        let part = f.get(2)?.parse().ok()?;
        let node = || f.get(3).map(|s| s.to_string());
        let parsed = match *f.get(1)? {
            "assign" => TrackerLine::Assign { part, node: node()?, deadline: f.get(4)?.parse().ok()? },
            "reissue" => TrackerLine::Reissue { part, node: node()? },
            "reject" => TrackerLine::Reject { part, node: node()?, reason: f[4..].join(" ") },
            "exhausted" => TrackerLine::Exhausted { part },
            "accept" => TrackerLine::Accept {
                part,
                node: node()?,
                bytes: f.get(4)?.parse().ok()?,
                app_bytes: f.get(5)?.parse().ok()?,
                seconds: f.get(6)?.parse().ok()?,
            },
            _ => return None,
        };
        Some((ts, parsed))
    }
}

pub fn read_tracker_log(path: &Path) -> io::Result<Vec<(f64, TrackerLine)>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text.lines().filter_map(TrackerLine::parse).collect()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleStatus {
    Ok,
    Failed,
    Cancelled,
    Incomplete,
}

impl CycleStatus {
    fn as_str(self) -> &'static str {
        match self {
            CycleStatus::Ok => "ok",
            CycleStatus::Failed => "failed",
            CycleStatus::Cancelled => "cancelled",
            CycleStatus::Incomplete => "incomplete",
        }
    }
}

/// One Time log line: `part begin end status`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEntry {
    pub part: u32,
    pub begin: f64,
    pub end: Option<f64>,
    pub status: CycleStatus,
}

impl TimeEntry {
    /// Elapsed seconds, or `None` for an entry without an end mark.
    pub fn elapsed(&self) -> Option<f64> {
        match (self.status, self.end) {
            (CycleStatus::Ok, Some(end)) => Some((end - self.begin).max(0.0)),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        let end = self.end.map_or_else(|| "-".to_string(), |e| format!("{e:?}"));
        format!("{} {:?} {} {}", self.part, self.begin, end, self.status.as_str())
    }

    pub fn parse(line: &str) -> Option<TimeEntry> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [part, begin, end, status] = f[..] else { return None };
        let status = match status {
            "ok" => CycleStatus::Ok,
            "failed" => CycleStatus::Failed,
            "cancelled" => CycleStatus::Cancelled,
            "incomplete" => CycleStatus::Incomplete,
            _ => return None,
        };
        Some(TimeEntry {
            part: part.parse().ok()?,
            begin: begin.parse().ok()?,
            end: if end == "-" { None } else { Some(end.parse().ok()?) },
            status,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LeechStore {
    root: PathBuf,
}

impl LeechStore {
    pub fn new(data_dir: &Path) -> Self {
        LeechStore { root: data_dir.join(LEECH_DIR) }
    }

    pub fn app_dir(&self, app: &AppId) -> PathBuf {
        self.root.join(app.to_string())
    }

    pub fn app_path(&self, app: &AppId) -> PathBuf {
        self.app_dir(app).join("app")
    }

    pub fn part_path(&self, app: &AppId, part: u32) -> PathBuf {
        self.app_dir(app).join("Data").join(part.to_string())
    }

    pub fn has_app(&self, app: &AppId) -> bool {
        self.app_path(app).is_file()
    }

    pub fn save_app(&self, app: &AppId, bytes: &[u8]) -> io::Result<()> {
        atomic_write(&self.app_path(app), bytes)
    }

    pub fn save_part(&self, app: &AppId, part: u32, bytes: &[u8]) -> io::Result<()> {
        atomic_write(&self.part_path(app, part), bytes)
    }

    /// SAVE.
    pub fn save_result(&self, app: &AppId, part: u32, payload: &[u8]) -> io::Result<PathBuf> {
        let path = self.app_dir(app).join("result").join(part.to_string());
        atomic_write(&path, payload)?;
        Ok(path)
    }

    /// LOAD. A result that was never saved is a `NotFound` error.
    pub fn load_result(&self, app: &AppId, part: u32) -> io::Result<Vec<u8>> {
        fs::read(self.app_dir(app).join("result").join(part.to_string()))
    }

    pub fn pending_results(&self, app: &AppId) -> io::Result<Vec<u32>> {
        numbered_files(&self.app_dir(app).join("result"))
    }

    /// Removes the data and result files of one finished part.
    pub fn clear_part(&self, app: &AppId, part: u32) -> io::Result<()> {
        for path in [self.part_path(app, part), self.app_dir(app).join("result").join(part.to_string())] {
            match fs::remove_file(path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn time_log_path(&self, app: &AppId) -> PathBuf {
        self.app_dir(app).join("Data").join(TIME_LOG)
    }

    pub fn log_time(&self, app: &AppId, entry: &TimeEntry) -> io::Result<()> {
        fs::create_dir_all(self.app_dir(app).join("Data"))?;
        append_line(&self.time_log_path(app), &entry.render())
    }

    pub fn read_time_log(&self, app: &AppId) -> io::Result<Vec<TimeEntry>> {
        match fs::read_to_string(self.time_log_path(app)) {
            Ok(text) => Ok(text.lines().filter_map(TimeEntry::parse).collect()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    /// STOP on disk: removes the whole app subtree. Idempotent.
    pub fn remove(&self, app: &AppId) -> io::Result<()> {
        match fs::remove_dir_all(self.app_dir(app)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}
