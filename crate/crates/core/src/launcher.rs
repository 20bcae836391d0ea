//! Launchers turn a job's executable, arguments and process geometry into the
//! command line that starts it inside an allocation.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::JobSpec;

pub const NPROC: &str = "{NPROC}";
pub const PPN: &str = "{PPN}";
pub const EXECUTABLE: &str = "{EXECUTABLE}";
pub const ARGS: &str = "{ARGS}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LauncherDescriptor {
    pub name: String,
    pub template: Vec<String>,
    /// Start NPROC copies of the rendered line and report the worst exit code.
    #[serde(default)]
    pub replicate: bool,
}

/// A rendered launch command. `copies > 1` only for replicating launchers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchLine {
    pub tokens: Vec<String>,
    pub copies: u32,
}

impl LauncherDescriptor {
    pub fn new(name: &str, template: &[&str]) -> Result<Self> {
        let d = LauncherDescriptor {
            name: name.to_string(),
            template: template.iter().map(|t| t.to_string()).collect(),
            replicate: false,
        };
        d.check()?;
        Ok(d)
    }

    pub fn check(&self) -> Result<()> {
        let name_re = Regex::new("^[a-z][a-z0-9-]*$").unwrap();
        if !name_re.is_match(&self.name) {
            return Err(Error::InvalidPlugin(format!(
                "launcher name {:?} must match [a-z][a-z0-9-]*",
                self.name
            )));
        }
        let positions = |ph: &str| -> Vec<usize> {
            self.template
                .iter()
                .enumerate()
                .filter(|(_, t)| t.contains(ph))
                .map(|(i, _)| i)
                .collect()
        };
        let exe = positions(EXECUTABLE);
        let args = positions(ARGS);
        let whole = |i: usize, ph: &str| self.template[i] == ph;
        match (exe.as_slice(), args.as_slice()) {
            ([e], [a]) if e < a && whole(*e, EXECUTABLE) && whole(*a, ARGS) => Ok(()),
            _ => Err(Error::InvalidPlugin(format!(
                "launcher {}: template must hold {EXECUTABLE} and then {ARGS}, each exactly once as a whole token",
                self.name
            ))),
        }
    }
}

/// Renders the launch line for `spec`.
///
/// `{NPROC}` resolves to `process_count`, else `node_count ×
/// processes_per_node`; `{PPN}` to `processes_per_node`, else an exact
/// `process_count / node_count`. `{ARGS}` expands to zero or more tokens.
pub fn render_launch_line(launcher: &LauncherDescriptor, spec: &JobSpec) -> Result<LaunchLine> {
    let unresolvable = |placeholder| Error::UnresolvablePlaceholder {
        launcher: launcher.name.clone(),
        placeholder,
    };
    let nproc = || {
        spec.resources
            .total_processes()
            .ok_or_else(|| unresolvable(NPROC))
    };
    let ppn = || spec.resources.per_node().ok_or_else(|| unresolvable(PPN));

    let mut tokens = Vec::with_capacity(launcher.template.len() + spec.arguments.len());
    for token in &launcher.template {
        if token == EXECUTABLE {
            tokens.push(spec.executable.clone());
        } else if token == ARGS {
            tokens.extend(spec.arguments.iter().cloned());
        } else {
            let mut t = token.clone();
            if t.contains(NPROC) {
                t = t.replace(NPROC, &nproc()?.to_string());
            }
            if t.contains(PPN) {
                t = t.replace(PPN, &ppn()?.to_string());
            }
            tokens.push(t);
        }
    }
    let copies = if launcher.replicate { nproc()? } else { 1 };
    Ok(LaunchLine { tokens, copies })
}

/// The set of launchers an executor can use, keyed by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Launchers {
    by_name: BTreeMap<String, LauncherDescriptor>,
}

impl Default for Launchers {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Launchers {
    pub fn builtin() -> Self {
        let plain = |name: &str, template: &[&str]| LauncherDescriptor {
            name: name.to_string(),
            template: template.iter().map(|s| s.to_string()).collect(),
            replicate: false,
        };
        let mut multi = plain("multi", &[EXECUTABLE, ARGS]);
        multi.replicate = true;
        let all = [
            plain("single", &[EXECUTABLE, ARGS]),
            multi,
            plain("mpirun", &["mpirun", "-np", NPROC, EXECUTABLE, ARGS]),
            plain("srun", &["srun", "--ntasks", NPROC, EXECUTABLE, ARGS]),
            plain("aprun", &["aprun", "-n", NPROC, "-N", PPN, EXECUTABLE, ARGS]),
            plain(
                "jsrun",
                &["jsrun", "--nrs", NPROC, "--tasks_per_rs", "1", EXECUTABLE, ARGS],
            ),
        ];
        Launchers {
            by_name: all.into_iter().map(|d| (d.name.clone(), d)).collect(),
        }
    }

    pub fn empty() -> Self {
        Launchers {
            by_name: BTreeMap::new(),
        }
    }

    /// Adds or replaces a launcher.
    pub fn insert(&mut self, descriptor: LauncherDescriptor) -> Result<()> {
        descriptor.check()?;
        self.by_name.insert(descriptor.name.clone(), descriptor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&LauncherDescriptor> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::UnknownLauncher(name.to_string()))
    }

    pub fn for_spec(&self, spec: &JobSpec) -> Result<&LauncherDescriptor> {
        self.get(spec.launcher_name())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::job::ResourceSpec;

    fn app(resources: ResourceSpec) -> JobSpec {
        let mut spec = JobSpec::new("app").arg("-x");
        spec.resources = resources;
        spec
    }

    fn line(name: &str, spec: &JobSpec) -> Result<LaunchLine> {
        render_launch_line(Launchers::builtin().get(name).unwrap(), spec)
    }

    #[test]
    fn single_is_identity() {
        let l = line("single", &app(ResourceSpec::default())).unwrap();
        assert_eq!(l.tokens, ["app", "-x"]);
        assert_eq!(l.copies, 1);
    }

    #[test]
    fn mpirun_with_process_count() {
        let spec = app(ResourceSpec {
            process_count: Some(8),
            ..Default::default()
        });
        assert_eq!(
            line("mpirun", &spec).unwrap().tokens,
            ["mpirun", "-np", "8", "app", "-x"]
        );
    }

    #[test]
    fn mpirun_from_geometry() {
        let spec = app(ResourceSpec {
            node_count: Some(2),
            processes_per_node: Some(3),
            ..Default::default()
        });
        assert_eq!(
            line("mpirun", &spec).unwrap().tokens,
            ["mpirun", "-np", "6", "app", "-x"]
        );
    }

    #[test]
    fn mpirun_without_geometry_fails() {
        let err = line("mpirun", &app(ResourceSpec::default())).unwrap_err();
        assert!(matches!(
            err,
            Error::UnresolvablePlaceholder {
                placeholder: NPROC,
                ..
            }
        ));
    }

    #[test]
    fn aprun_needs_ppn() {
        let spec = app(ResourceSpec {
            node_count: Some(2),
            process_count: Some(8),
            ..Default::default()
        });
        assert_eq!(
            line("aprun", &spec).unwrap().tokens,
            ["aprun", "-n", "8", "-N", "4", "app", "-x"]
        );
        let spec = app(ResourceSpec {
            node_count: Some(3),
            process_count: Some(8),
            ..Default::default()
        });
        assert!(matches!(
            line("aprun", &spec),
            Err(Error::UnresolvablePlaceholder { placeholder: PPN, .. })
        ));
    }

    #[test]
    fn srun_and_jsrun() {
        let spec = app(ResourceSpec {
            process_count: Some(4),
            ..Default::default()
        });
        assert_eq!(
            line("srun", &spec).unwrap().tokens,
            ["srun", "--ntasks", "4", "app", "-x"]
        );
        assert_eq!(
            line("jsrun", &spec).unwrap().tokens,
            ["jsrun", "--nrs", "4", "--tasks_per_rs", "1", "app", "-x"]
        );
    }

    #[test]
    fn multi_replicates() {
        let spec = app(ResourceSpec {
            process_count: Some(3),
            ..Default::default()
        });
        let l = line("multi", &spec).unwrap();
        assert_eq!(l.tokens, ["app", "-x"]);
        assert_eq!(l.copies, 3);
        assert!(line("multi", &app(ResourceSpec::default())).is_err());
    }

    #[test]
    fn template_checks() {
        assert!(LauncherDescriptor::new("ok", &["x", EXECUTABLE, ARGS]).is_ok());
        assert!(LauncherDescriptor::new("noargs", &[EXECUTABLE]).is_err());
        assert!(LauncherDescriptor::new("twice", &[EXECUTABLE, EXECUTABLE, ARGS]).is_err());
        assert!(LauncherDescriptor::new("order", &[ARGS, EXECUTABLE]).is_err());
        assert!(LauncherDescriptor::new("Bad", &[EXECUTABLE, ARGS]).is_err());
        assert!(LauncherDescriptor::new("glued", &["--exe={EXECUTABLE}", ARGS]).is_err());
    }
}
