//! Write-temp-then-rename file replacement.

use std::io::{self, Write};
use std::path::Path;

use crate::protocol::NodeId;

/// Replaces `path` with `content` so readers see either the old or the new
/// file, never a partial one.
pub fn atomic_write(path: &Path, content: &[u8]) -> io::Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(content)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Loads the node id kept in `dir/node_id`, creating one on first start.
pub fn load_or_create_node_id(dir: &Path) -> io::Result<NodeId> {
    let path = dir.join("node_id");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(id) = text.trim().parse() {
            return Ok(id);
        }
    }
    let id = NodeId::random();
    atomic_write(&path, format!("{id}\n").as_bytes())?;
    Ok(id)
}
