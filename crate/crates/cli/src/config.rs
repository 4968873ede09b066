use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use mvroi_core::simulator::SimConfig;

/// Contents of a `run`/`compare` config file. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub trace: PathBuf,
    /// Profile file; the built-in three-model ladder when absent.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sim: SimConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfigFile =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.trace = base.join(&cfg.trace);
        cfg.profiles = cfg.profiles.map(|p| base.join(p));
        cfg.output_dir = base.join(&cfg.output_dir);
        if !cfg.trace.is_file() {
            anyhow::bail!("trace file {} does not exist", cfg.trace.display());
        }
        if let Some(p) = &cfg.profiles {
            if !p.is_file() {
                anyhow::bail!("profile file {} does not exist", p.display());
            }
        }
        Ok(cfg)
    }
}
