use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use iwgae::GaeConfig;
use serde::Serialize;

use crate::inputs::Inputs;

/// Written to `manifest.json` in every output directory.
#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config: &'a GaeConfig,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: &'static str,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

pub struct Clock {
    wall: SystemTime,
    mono: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            wall: SystemTime::now(),
            mono: Instant::now(),
        }
    }
}

/// Writes to a temporary name first and renames into place.
pub fn write(
    dir: &Path,
    command: &str,
    cfg: &GaeConfig,
    inputs: Inputs,
    outputs: Vec<String>,
    clock: Clock,
) -> anyhow::Result<()> {
    let manifest = RunManifest {
        command,
        config: cfg,
        inputs: inputs.hashes,
        outputs,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        started_unix_ms: clock.wall.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
        elapsed_ms: clock.mono.elapsed().as_millis(),
    };
    let tmp = dir.join(".manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
    std::fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(())
}
