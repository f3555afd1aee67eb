//! Seeded app description: an application file plus a data manifest.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use vc_core::protocol::AppId;
use vc_core::workloads::{parse_manifest, partition_range, prime_app_file, write_manifest, RangeSpec, WorkUnit};

use crate::AgentError;

/// `APP_FILE,MANIFEST` on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppSpec {
    pub app: PathBuf,
    pub manifest: PathBuf,
}

impl FromStr for AppSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(',') {
            Some((a, m)) if !a.is_empty() && !m.is_empty() => Ok(AppSpec { app: a.into(), manifest: m.into() }),
            _ => Err(format!("expected APP_FILE,MANIFEST, got {s:?}")),
        }
    }
}

impl AppSpec {
    pub fn load(&self) -> Result<(Vec<u8>, Vec<WorkUnit>), AgentError> {
        let app = std::fs::read(&self.app)
            .map_err(|e| AgentError::Config(format!("{}: {e}", self.app.display())))?;
        let text = std::fs::read_to_string(&self.manifest)
            .map_err(|e| AgentError::Config(format!("{}: {e}", self.manifest.display())))?;
        let units = parse_manifest(&text).map_err(|e| AgentError::Config(format!("{}: {e}", self.manifest.display())))?;
        Ok((app, units))
    }
}

pub const APP_FILE_NAME: &str = "app.py";
pub const MANIFEST_FILE_NAME: &str = "manifest";

/// Writes a prime-search app and its manifest into `dir`.
pub fn make_prime_app(dir: &Path, label: &str, range: &RangeSpec) -> Result<(AppId, AppSpec), AgentError> {
    let units = partition_range(range).map_err(|e| AgentError::Config(e.to_string()))?;
    std::fs::create_dir_all(dir)?;
    let spec = AppSpec { app: dir.join(APP_FILE_NAME), manifest: dir.join(MANIFEST_FILE_NAME) };
    let bytes = prime_app_file(label);
    std::fs::write(&spec.app, &bytes)?;
    std::fs::write(&spec.manifest, write_manifest(&units))?;
    Ok((AppId::of(&bytes), spec))
}
