//! Executes a foreign application against one data part.

use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;
use vc_core::workloads::{is_builtin_prime_app, run_prime_search};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cancelled")]
    Cancelled,
    #[error("application is not runnable here: {0}")]
    Unsupported(String),
    #[error("application failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Runner: Send + Sync {
    fn run(&self, app: &Path, data: &Path, cancel: &AtomicBool) -> Result<Vec<u8>, RunError>;
}

/// In-process prime search for app files carrying the builtin marker.
#[derive(Debug, Default, Clone, Copy)]
pub struct BuiltinRunner;

impl Runner for BuiltinRunner {
    fn run(&self, app: &Path, data: &Path, cancel: &AtomicBool) -> Result<Vec<u8>, RunError> {
        let app_bytes = std::fs::read(app)?;
        if !is_builtin_prime_app(&app_bytes) {
            return Err(RunError::Unsupported("no builtin runner for this app".into()));
        }
        let data = std::fs::read(data)?;
        match run_prime_search(&data, cancel) {
            Ok(out) => Ok(out),
            Err(_) if cancel.load(Ordering::SeqCst) => Err(RunError::Cancelled),
            Err(e) => Err(RunError::Failed(e.to_string())),
        }
    }
}

/// Runs `sh -c CMD` with `VC_APP` and `VC_DATA` set to the file paths; the
/// result is whatever the command prints on stdout.
#[derive(Debug, Clone)]
pub struct ExecRunner {
    pub command: String,
}

impl Runner for ExecRunner {
    fn run(&self, app: &Path, data: &Path, cancel: &AtomicBool) -> Result<Vec<u8>, RunError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .env("VC_APP", app)
            .env("VC_DATA", data)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = thread::spawn(move || {
            let mut out = Vec::new();
            stdout.read_to_end(&mut out).map(|_| out)
        });
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if cancel.load(Ordering::SeqCst) {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RunError::Cancelled);
            }
            thread::sleep(Duration::from_millis(10));
        };
        let out = reader.join().map_err(|_| RunError::Failed("stdout reader panicked".into()))??;
        if !status.success() {
            return Err(RunError::Failed(format!("exit status {status}")));
        }
        Ok(out)
    }
}

/// Wraps a runner and damages a fraction of its results while keeping them
/// well-formed: the last line is dropped, or a bogus line appended when
/// there is nothing to drop.
pub struct CorruptingRunner<R> {
    inner: R,
    rate: f64,
    rng: Mutex<StdRng>,
}

impl<R: Runner> CorruptingRunner<R> {
    pub fn new(inner: R, rate: f64, seed: u64) -> Self {
        CorruptingRunner { inner, rate: rate.clamp(0.0, 1.0), rng: Mutex::new(StdRng::seed_from_u64(seed)) }
    }
}

pub fn corrupt(payload: &[u8]) -> Vec<u8> {
    let body = payload.strip_suffix(b"\n").unwrap_or(payload);
    match body.iter().rposition(|&b| b == b'\n') {
        Some(i) => payload[..=i].to_vec(),
        None if !body.is_empty() => Vec::new(),
        None => b"4\n".to_vec(),
    }
}

impl<R: Runner> Runner for CorruptingRunner<R> {
    fn run(&self, app: &Path, data: &Path, cancel: &AtomicBool) -> Result<Vec<u8>, RunError> {
        let out = self.inner.run(app, data, cancel)?;
        let hit = self.rng.lock().unwrap_or_else(|e| e.into_inner()).gen_bool(self.rate);
        Ok(if hit { corrupt(&out) } else { out })
    }
}

/// Runner selection from the command line: `builtin` or `exec:CMD`.
#[derive(Debug, Clone, PartialEq)]
pub enum RunnerSpec {
    Builtin,
    Exec(String),
}

impl FromStr for RunnerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            _ if s == "builtin" => Ok(RunnerSpec::Builtin),
            Some(("exec", cmd)) if !cmd.trim().is_empty() => Ok(RunnerSpec::Exec(cmd.to_string())),
            _ => Err(format!("unknown runner {s:?}; expected builtin or exec:CMD")),
        }
    }
}

impl RunnerSpec {
    pub fn build(&self, corrupt_rate: f64, seed: u64) -> Box<dyn Runner> {
        match (self, corrupt_rate > 0.0) {
            (RunnerSpec::Builtin, false) => Box::new(BuiltinRunner),
            (RunnerSpec::Builtin, true) => Box::new(CorruptingRunner::new(BuiltinRunner, corrupt_rate, seed)),
            (RunnerSpec::Exec(c), false) => Box::new(ExecRunner { command: c.clone() }),
            (RunnerSpec::Exec(c), true) => {
                Box::new(CorruptingRunner::new(ExecRunner { command: c.clone() }, corrupt_rate, seed))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vc_core::workloads::{check_payload, encode_data_part, prime_app_file, prime_app_runner, WorkUnit};

    fn files(unit: &WorkUnit) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let app = dir.path().join("app");
        let data = dir.path().join("data");
        std::fs::write(&app, prime_app_file("r")).unwrap();
        std::fs::write(&data, encode_data_part(unit)).unwrap();
        (dir, app, data)
    }

    #[test]
    fn builtin_matches_reference() {
        let unit = WorkUnit { index: 0, lo: 3, hi: 974 };
        let (_d, app, data) = files(&unit);
        let out = BuiltinRunner.run(&app, &data, &AtomicBool::new(false)).unwrap();
        assert_eq!(out, prime_app_runner(&unit));
        // Deterministic.
        assert_eq!(BuiltinRunner.run(&app, &data, &AtomicBool::new(false)).unwrap(), out);
    }

    #[test]
    fn builtin_refuses_other_apps() {
        let unit = WorkUnit { index: 0, lo: 3, hi: 10 };
        let (_d, app, data) = files(&unit);
        std::fs::write(&app, b"#!/bin/sh\necho hi\n").unwrap();
        assert!(matches!(BuiltinRunner.run(&app, &data, &AtomicBool::new(false)), Err(RunError::Unsupported(_))));
    }

    #[test]
    fn exec_runner_and_exit_status() {
        let unit = WorkUnit { index: 0, lo: 3, hi: 10 };
        let (_d, app, data) = files(&unit);
        let ok = ExecRunner { command: "test -f \"$VC_APP\" && test -f \"$VC_DATA\" && printf '3\\n5\\n7\\n'".into() };
        assert_eq!(ok.run(&app, &data, &AtomicBool::new(false)).unwrap(), b"3\n5\n7\n");
        let bad = ExecRunner { command: "exit 3".into() };
        assert!(matches!(bad.run(&app, &data, &AtomicBool::new(false)), Err(RunError::Failed(_))));
        let slow = ExecRunner { command: "sleep 5".into() };
        let cancel = AtomicBool::new(true);
        assert!(matches!(slow.run(&app, &data, &cancel), Err(RunError::Cancelled)));
    }

    #[test]
    fn corruption_stays_well_formed_but_differs() {
        let unit = WorkUnit { index: 0, lo: 3, hi: 100 };
        let good = prime_app_runner(&unit);
        let bad = corrupt(&good);
        assert_ne!(bad, good);
        assert!(check_payload(&unit, &bad).is_ok());
        assert_eq!(corrupt(b"3\n"), b"");
        assert_eq!(corrupt(b""), b"4\n");
    }

    #[test]
    fn runner_spec_parsing() {
        assert_eq!("builtin".parse::<RunnerSpec>().unwrap(), RunnerSpec::Builtin);
        assert_eq!("exec:python3 app".parse::<RunnerSpec>().unwrap(), RunnerSpec::Exec("python3 app".into()));
        assert!("exec:".parse::<RunnerSpec>().is_err());
        assert!("wasm".parse::<RunnerSpec>().is_err());
    }
}
