use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use psij_core::ExecutorConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "PSIJ_KIT_CONFIG";

/// Site configuration: executor settings keyed by registry name.
///
/// ```json
/// {
///   "default_executor": "slurm",
///   "executors": {
///     "slurm": { "poll_interval": "10s", "work_directory": "/scratch/me/psij" },
///     "mock":  { "profile": "pbs", "command_prefix": ["/opt/bin/mock-lrm"] }
///   }
/// }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_executor: Option<String>,
    #[serde(default)]
    pub executors: BTreeMap<String, ExecutorConfig>,
}

pub fn default_path() -> Option<PathBuf> {
    dirs::config_dir().map(|d| d.join("psij").join("config.json"))
}

impl SiteConfig {
    /// Reads `explicit` if given (it must exist), else the per-user file if
    /// present, else the empty configuration.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let (path, required) = match explicit {
            Some(p) => (p.to_path_buf(), true),
            None => match default_path() {
                Some(p) => (p, false),
                None => return Ok(SiteConfig::default()),
            },
        };
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(SiteConfig::default())
            }
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        let cfg: SiteConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing site configuration {}", path.display()))?;
        for (name, c) in &cfg.executors {
            c.validate().with_context(|| format!("executor {name:?} in {}", path.display()))?;
        }
        Ok(cfg)
    }

    pub fn executor_name(&self, flag: Option<&str>) -> String {
        flag.map(str::to_string)
            .or_else(|| self.default_executor.clone())
            .unwrap_or_else(|| "local".to_string())
    }

    /// Settings for `name`. Submit windows are meaningless for a
    /// one-shot process and are switched off.
    pub fn executor_config(&self, name: &str) -> ExecutorConfig {
        let mut c = self.executors.get(name).cloned().unwrap_or_default();
        c.submit_window = None;
        c
    }

    /// Every work directory a job record may live in, configured ones first.
    pub fn work_directories(&self) -> Vec<PathBuf> {
        let mut dirs: Vec<PathBuf> = Vec::new();
        let all = self
            .executors
            .values()
            .map(|c| c.work_directory.clone())
            .chain([ExecutorConfig::default().work_directory]);
        for d in all {
            if !dirs.contains(&d) {
                dirs.push(d);
            }
        }
        dirs
    }
}
