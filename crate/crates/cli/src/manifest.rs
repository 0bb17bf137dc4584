use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use handstream::io_util::write_atomic;
use serde::{Deserialize, Serialize};

use crate::commands::Run;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-frame latency in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub frames: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
}

impl Latency {
    pub fn from_ms(mut ms: Vec<f64>) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        ms.sort_by(f64::total_cmp);
        let at = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
        Some(Self {
            frames: ms.len(),
            p50_ms: at(0.5),
            p95_ms: at(0.95),
            max_ms: ms[ms.len() - 1],
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_frame: Option<Latency>,
}

/// Record of one command invocation. `run` holds the fully resolved inputs,
/// so `handstream replay` can repeat the run without the original config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub run: Run,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(&path, format!("{json}\n").as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::data::read_config(path)?;
        serde_json::from_str::<Self>(&text)
            .map_err(|e| crate::UsageError(format!("{}: not a run manifest: {e}", path.display())).into())
    }
}
