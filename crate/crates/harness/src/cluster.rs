//! Child processes: one tracker and one agent per roster node, each with
//! its own data directory and stdout/stderr files.

use std::fs::{self, File};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use vc_core::protocol::NodeId;

use crate::HarnessError;

const STARTUP_TIMEOUT: Duration = Duration::from_secs(20);

/// Executables the harness launches.
#[derive(Debug, Clone)]
pub struct Binaries {
    pub tracker: PathBuf,
    pub agent: PathBuf,
}

impl Binaries {
    /// `tracker` and `agent` next to the running executable.
    pub fn beside_current_exe() -> Result<Self, HarnessError> {
        let exe = std::env::current_exe()?;
        let dir = exe.parent().ok_or_else(|| HarnessError::Config("executable has no parent dir".into()))?;
        let bins = Binaries { tracker: dir.join(exe_name("tracker")), agent: dir.join(exe_name("agent")) };
        for b in [&bins.tracker, &bins.agent] {
            if !b.is_file() {
                return Err(HarnessError::Config(format!("{} not found; build the workspace first", b.display())));
            }
        }
        Ok(bins)
    }
}

fn exe_name(base: &str) -> String {
    format!("{base}{}", std::env::consts::EXE_SUFFIX)
}

/// A running tracker or agent.
#[derive(Debug)]
pub struct Proc {
    pub name: String,
    pub dir: PathBuf,
    pub node: NodeId,
    pub addr: SocketAddr,
    child: Child,
    exited: bool,
}

impl Proc {
    /// Starts `program args` with `dir` holding its logs and waits for the
    /// `<role> <node> listening on <addr>` line.
    pub fn spawn(name: &str, program: &Path, args: &[String], dir: &Path) -> Result<Proc, HarnessError> {
        fs::create_dir_all(dir)?;
        let stdout_path = dir.join("stdout.log");
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdin(Stdio::null())
            .stdout(File::create(&stdout_path)?)
            .stderr(File::create(dir.join("stderr.log"))?);
        if std::env::var_os("RUST_LOG").is_none() {
            cmd.env("RUST_LOG", "warn");
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| HarnessError::Spawn(format!("{name}: {}: {e}", program.display())))?;
        let start = Instant::now();
        loop {
            let text = fs::read_to_string(&stdout_path).unwrap_or_default();
            if let Some((node, addr)) = text.lines().find_map(parse_banner) {
                return Ok(Proc { name: name.into(), dir: dir.into(), node, addr, child, exited: false });
            }
            if let Some(status) = child.try_wait()? {
                let err = fs::read_to_string(dir.join("stderr.log")).unwrap_or_default();
                return Err(HarnessError::Spawn(format!("{name} exited with {status}: {}", err.trim())));
            }
            if start.elapsed() > STARTUP_TIMEOUT {
                let _ = child.kill();
                let _ = child.wait();
                return Err(HarnessError::Spawn(format!("{name} did not report its address")));
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Whether the process is still running.
    pub fn alive(&mut self) -> bool {
        !self.exited && matches!(self.child.try_wait(), Ok(None))
    }

    /// Freezes the process; its sockets stay open but nothing answers.
    pub fn mute(&self) -> Result<(), HarnessError> {
        self.signal("-STOP")
    }

    pub fn resume(&self) -> Result<(), HarnessError> {
        self.signal("-CONT")
    }

    fn signal(&self, sig: &str) -> Result<(), HarnessError> {
        let status = Command::new("kill").arg(sig).arg(self.pid().to_string()).status()?;
        if status.success() {
            Ok(())
        } else {
            Err(HarnessError::Spawn(format!("kill {sig} {} failed", self.pid())))
        }
    }

    pub fn kill(&mut self) {
        if self.exited {
            return;
        }
        // A stopped process must be continued to die promptly on some systems.
        let _ = self.signal("-CONT");
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.exited = true;
    }

    pub fn stderr_tail(&self, lines: usize) -> String {
        let text = fs::read_to_string(self.dir.join("stderr.log")).unwrap_or_default();
        let all: Vec<&str> = text.lines().collect();
        all[all.len().saturating_sub(lines)..].join("\n")
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        self.kill();
    }
}

fn parse_banner(line: &str) -> Option<(NodeId, SocketAddr)> {
    let mut words = line.split_whitespace();
    let _role = words.next()?;
    let node = words.next()?.parse().ok()?;
    if (words.next()?, words.next()?) != ("listening", "on") {
        return None;
    }
    Some((node, words.next()?.parse().ok()?))
}
