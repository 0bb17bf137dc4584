use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use handstream::pose_io::{self, AdapterConfig, Format, PoseSequence};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Canonical,
    Shrec22,
    Shrec19,
}

/// A directory of sequences plus everything needed to parse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub dir: PathBuf,
    pub format: DataFormat,
    /// Resolved adapter for the external formats.
    pub adapter: Option<AdapterConfig>,
}

impl DataSource {
    pub fn resolve(dir: &Path, format: DataFormat, adapter: Option<&Path>) -> Result<Self> {
        let adapter = match format {
            DataFormat::Canonical => None,
            DataFormat::Shrec22 | DataFormat::Shrec19 => {
                let base = if format == DataFormat::Shrec22 {
                    AdapterConfig::shrec22()
                } else {
                    AdapterConfig::shrec19()
                };
                let cfg = match adapter {
                    Some(p) => AdapterConfig::from_toml(&read_config(p)?, base)?,
                    None => base,
                };
                cfg.validate()?;
                Some(cfg)
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            adapter,
        })
    }

    /// Sequences keyed by file stem, in file-name order.
    pub fn load(&self) -> Result<Vec<(String, PoseSequence)>> {
        let (format, paths) = match (&self.format, &self.adapter) {
            (DataFormat::Canonical, _) => (Format::Canonical, pose_io::sequence_files(&self.dir)?),
            (f, Some(a)) => {
                let format = if *f == DataFormat::Shrec22 {
                    Format::Shrec22(a.clone())
                } else {
                    Format::Shrec19(a.clone())
                };
                (format, external_files(&self.dir, a)?)
            }
            (_, None) => anyhow::bail!(handstream::Error::Config("external format without an adapter".into())),
        };
        if paths.is_empty() {
            anyhow::bail!(handstream::Error::EmptyCorpus);
        }
        paths
            .iter()
            .map(|p| {
                let seq = pose_io::parse_sequence(p, &format).with_context(|| format!("reading {}", p.display()))?;
                Ok((stem(p), seq))
            })
            .collect()
    }
}

fn external_files(dir: &Path, adapter: &AdapterConfig) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        anyhow::bail!(handstream::Error::FileNotFound(dir.to_path_buf()));
    }
    let skip = adapter.annotations.as_ref().map(|a| dir.join(a));
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter(|p| skip.as_ref() != Some(p))
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads a config file, reporting a missing one as a config error that names the path.
pub fn read_config(path: &Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(crate::UsageError(format!(
            "config file not found: {}",
            path.display()
        ))
        .into()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}
