use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::Regex;
use semver::Version;
use serde::{Deserialize, Serialize};

use super::{BatchExecutor, Executor, ExecutorConfig};
use crate::error::{Error, Result};
use crate::launcher::{LauncherDescriptor, Launchers};
use crate::local::LocalExecutor;
use crate::lrm::{SchedulerKind, SchedulerProfile};

/// Colon-separated (on Unix) list of plugin manifest directories.
pub const PLUGIN_PATH_ENV: &str = "PSIJ_PLUGIN_PATH";

/// Builds an executor instance named `name`.
pub type ExecutorFactory =
    Arc<dyn Fn(&str, &ExecutorConfig, &Launchers) -> Result<Box<dyn Executor>> + Send + Sync>;

#[derive(Clone)]
pub struct ExecutorDescriptor {
    pub name: String,
    pub version: Version,
    pub factory: ExecutorFactory,
}

impl std::fmt::Debug for ExecutorDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecutorDescriptor")
            .field("name", &self.name)
            .field("version", &self.version.to_string())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PluginKind {
    #[default]
    Executor,
    Launcher,
}

/// A plugin manifest file (`*.json` in a plugin directory).
///
/// Executor entry points name a compiled-in implementation as
/// `builtin:<local|slurm|pbs|lsf|mock>`. Launcher manifests carry their
/// template instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginManifest {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub kind: PluginKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_point: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub template: Vec<String>,
    #[serde(default)]
    pub replicate: bool,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct DiscoveryReport {
    /// `(name, version)` of every plugin registered, in load order.
    pub loaded: Vec<(String, String)>,
    /// Manifests that were rejected, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Executors and launchers known to this process.
pub struct Registry {
    executors: BTreeMap<String, BTreeMap<Version, ExecutorDescriptor>>,
    launchers: Launchers,
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn name_regex() -> Regex {
    Regex::new("^[a-z][a-z0-9-]*$").unwrap()
}

/// Factory for a compiled-in executor kind.
pub fn builtin_factory(kind: &str) -> Option<ExecutorFactory> {
    let f: ExecutorFactory = match kind {
        "local" => Arc::new(|name, config, launchers| {
            Ok(Box::new(LocalExecutor::new(name, config.clone(), launchers.clone())?))
        }),
        "slurm" | "pbs" | "lsf" => {
            let kind: SchedulerKind = kind.parse().ok()?;
            Arc::new(move |name, config, launchers| {
                Ok(Box::new(BatchExecutor::new(
                    name,
                    SchedulerProfile::new(kind),
                    config.clone(),
                    launchers.clone(),
                )?))
            })
        }
        "mock" => Arc::new(|name, config, launchers| {
            let profile_name = config.profile.as_deref().unwrap_or("slurm");
            let kind: SchedulerKind = profile_name.parse()?;
            let mut config = config.clone();
            let tool = if config.command_prefix.is_empty() {
                vec!["mock-lrm".to_string()]
            } else {
                std::mem::take(&mut config.command_prefix)
            };
            config.command_prefix = ["env".to_string(), format!("MOCK_LRM_PROFILE={kind}")]
                .into_iter()
                .chain(tool)
                .collect();
            let bulk = config.bulk_submit.unwrap_or(true);
            Ok(Box::new(BatchExecutor::new(
                name,
                SchedulerProfile::new(kind).with_bulk_submit(bulk),
                config,
                launchers.clone(),
            )?))
        }),
        _ => return None,
    };
    Some(f)
}

/// Directories scanned by [`Registry::discover`]: the per-user default
/// first, then each entry of `PSIJ_PLUGIN_PATH`.
pub fn plugin_search_path() -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = dirs::config_dir()
        .map(|d| d.join("psij").join("plugins"))
        .into_iter()
        .collect();
    if let Some(path) = std::env::var_os(PLUGIN_PATH_ENV) {
        dirs.extend(std::env::split_paths(&path).filter(|p| !p.as_os_str().is_empty()));
    }
    dirs
}

impl Registry {
    /// An empty registry with no executors and no launchers.
    pub fn empty() -> Self {
        Registry {
            executors: BTreeMap::new(),
            launchers: Launchers::empty(),
        }
    }

    /// Registers the compiled-in executors and launchers.
    pub fn with_builtins() -> Self {
        let mut r = Registry {
            executors: BTreeMap::new(),
            launchers: Launchers::builtin(),
        };
        let version = Version::parse(env!("CARGO_PKG_VERSION")).expect("crate version is semver");
        for kind in ["local", "slurm", "pbs", "lsf", "mock"] {
            r.register(ExecutorDescriptor {
                name: kind.to_string(),
                version: version.clone(),
                factory: builtin_factory(kind).expect("builtin kind"),
            })
            .expect("builtins are distinct");
        }
        r
    }

    pub fn register(&mut self, descriptor: ExecutorDescriptor) -> Result<()> {
        if !name_regex().is_match(&descriptor.name) {
            return Err(Error::InvalidPlugin(format!(
                "executor name {:?} must match [a-z][a-z0-9-]*",
                descriptor.name
            )));
        }
        let versions = self.executors.entry(descriptor.name.clone()).or_default();
        if versions.contains_key(&descriptor.version) {
            return Err(Error::DuplicatePlugin {
                name: descriptor.name,
                version: descriptor.version,
            });
        }
        versions.insert(descriptor.version.clone(), descriptor);
        Ok(())
    }

    pub fn register_launcher(&mut self, descriptor: LauncherDescriptor) -> Result<()> {
        self.launchers.insert(descriptor)
    }

    pub fn launchers(&self) -> &Launchers {
        &self.launchers
    }

    /// Executor names, sorted.
    pub fn executor_names(&self) -> impl Iterator<Item = &str> {
        self.executors.keys().map(String::as_str)
    }

    pub fn versions(&self, name: &str) -> Vec<Version> {
        self.executors
            .get(name)
            .map(|v| v.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Highest registered version of `name`.
    pub fn descriptor(&self, name: &str) -> Result<&ExecutorDescriptor> {
        self.executors
            .get(name)
            .and_then(|v| v.values().next_back())
            .ok_or_else(|| Error::UnknownExecutor(name.to_string()))
    }

    /// Instantiates the highest registered version of `name`.
    pub fn get_executor(&self, name: &str, config: &ExecutorConfig) -> Result<Box<dyn Executor>> {
        let d = self.descriptor(name)?;
        (d.factory)(name, config, &self.launchers)
    }

    /// Loads every manifest found on [`plugin_search_path`].
    pub fn discover(&mut self) -> DiscoveryReport {
        self.discover_in(&plugin_search_path())
    }

    /// Loads `*.json` manifests from `dirs` in order; within a directory
    /// files load in name order. A manifest registering an already known
    /// `(name, version)` replaces it. Bad manifests are skipped and reported.
    pub fn discover_in(&mut self, dirs: &[PathBuf]) -> DiscoveryReport {
        let mut report = DiscoveryReport::default();
        for dir in dirs {
            let Ok(entries) = fs::read_dir(dir) else {
                continue;
            };
            let mut files: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json") && p.is_file())
                .collect();
            files.sort();
            for file in files {
                match self.load_manifest(&file) {
                    Ok((name, version)) => {
                        log::debug!("loaded plugin {name} {version} from {}", file.display());
                        report.loaded.push((name, version));
                    }
                    Err(e) => {
                        log::warn!("skipping plugin manifest {}: {e}", file.display());
                        report.skipped.push((file, e.to_string()));
                    }
                }
            }
        }
        report
    }

    fn load_manifest(&mut self, path: &Path) -> Result<(String, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: PluginManifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidPlugin(format!("malformed manifest: {e}")))?;
        let version = Version::parse(&m.version)
            .map_err(|e| Error::InvalidPlugin(format!("version {:?}: {e}", m.version)))?;
        match m.kind {
            PluginKind::Executor => {
                let entry = m.entry_point.as_deref().ok_or_else(|| {
                    Error::InvalidPlugin("executor manifest needs an entry_point".into())
                })?;
                let kind = entry.strip_prefix("builtin:").ok_or_else(|| {
                    Error::InvalidPlugin(format!("unsupported entry point {entry:?}"))
                })?;
                let factory = builtin_factory(kind).ok_or_else(|| {
                    Error::InvalidPlugin(format!("no implementation named {kind:?}"))
                })?;
                if !name_regex().is_match(&m.name) {
                    return Err(Error::InvalidPlugin(format!(
                        "executor name {:?} must match [a-z][a-z0-9-]*",
                        m.name
                    )));
                }
                self.executors.entry(m.name.clone()).or_default().insert(
                    version.clone(),
                    ExecutorDescriptor {
                        name: m.name.clone(),
                        version,
                        factory,
                    },
                );
            }
            PluginKind::Launcher => {
                self.register_launcher(LauncherDescriptor {
                    name: m.name.clone(),
                    template: m.template,
                    replicate: m.replicate,
                })?;
            }
        }
        Ok((m.name, m.version))
    }
}
