use crate::Failure;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Failure::Io(e.error))?;
    Ok(())
}

pub fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Reads a JSON config. Returns the parsed value and the directory used to
/// resolve relative paths inside it.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf), Failure> {
    let text = std::fs::read_to_string(path)?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Record written next to every output.
pub fn metadata(command: &str, config: &impl Serialize, seed: Option<u64>) -> serde_json::Value {
    serde_json::json!({
        "tool": "hdshrink",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "rng": "ChaCha8, one stream per (seed, cell, replication)",
        "config": config,
    })
}
