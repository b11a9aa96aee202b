//! Per-run manifest: one JSON file per invocation recording the
//! subcommand, its full parameter set, seeds, and the outcome.
//! Timestamps live only here, never in compared artifacts.

use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub subcommand: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
    pub library_version: String,
    pub start_unix_ms: u128,
    pub end_unix_ms: u128,
    pub passed: bool,
    pub summary: String,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Output directory: `--outdir` flag, else `PATH_ATTN_OUTDIR`, else `runs`.
pub fn resolve_outdir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("PATH_ATTN_OUTDIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn write(outdir: &Path, m: &RunManifest) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(outdir)?;
    let path = outdir.join(format!("manifest-{}.json", m.subcommand));
    let body = serde_json::to_string_pretty(m).expect("manifest serializes");
    std::fs::write(&path, body + "\n")?;
    Ok(path)
}
