//! Config files (TOML or JSON by extension) and run manifests.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Reads `path` as TOML (`.toml`) or JSON (`.json`) and merges it over
/// `base`: tables merge key by key, everything else replaces.
pub fn load_over<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let overlay: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => serde_json::to_value(
            toml::from_str::<toml::Table>(&text)
                .map_err(anyhow::Error::from)
                .with_context(|| format!("parsing config {}", path.display()))?,
        )?,
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?,
        _ => bail!("config {} must end in .toml or .json", path.display()),
    };
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, overlay);
    serde_json::from_value(merged).with_context(|| format!("invalid config {}", path.display()))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// What produced a run directory.
#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub args: Vec<String>,
    pub started_unix: u64,
    pub seconds: f64,
    pub config: &'a C,
    pub outputs: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    started_unix: u64,
    seconds: f64,
    config: &C,
    outputs: Vec<String>,
) -> Result<()> {
    let manifest = Manifest {
        tool: "clod",
        version: env!("CARGO_PKG_VERSION"),
        command,
        args: std::env::args().collect(),
        started_unix,
        seconds,
        config,
        outputs,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Parses `start:end:step` or a comma-separated list of scales.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("grid '{s}'"))?;
        if v[2].is_nan() || v[2] <= 0.0 || v[1] < v[0] {
            bail!("grid '{s}' needs start <= end and a positive step");
        }
        return Ok(clod_core::eval::scale_grid(v[0], v[1], v[2]));
    }
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("grid value '{p}'")))
        .collect()
}
