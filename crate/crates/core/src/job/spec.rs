use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// How the job's environment is seeded before `environment_overrides` apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvironmentPolicy {
    InheritAll,
    InheritNone,
}

/// Everything needed to run one job.
///
/// The serde form is the canonical job file: absent fields are omitted and
/// unknown fields are rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub executable: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arguments: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// `None` selects the executor's default policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment_policy: Option<EnvironmentPolicy>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub environment_overrides: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdin_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "ResourceSpec::is_empty")]
    pub resources: ResourceSpec,
    #[serde(default, skip_serializing_if = "JobAttributes::is_empty")]
    pub attributes: JobAttributes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Launcher used to start the payload inside the allocation; `None` is
    /// the `single` launcher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub launcher: Option<String>,
}

impl JobSpec {
    pub fn new(executable: impl Into<String>) -> Self {
        JobSpec {
            executable: executable.into(),
            ..Default::default()
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.arguments.push(arg.into());
        self
    }

    pub fn args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments.extend(args.into_iter().map(Into::into));
        self
    }

    pub fn launcher_name(&self) -> &str {
        self.launcher.as_deref().unwrap_or("single")
    }

    /// Whether stdout and stderr go to the same file.
    pub fn merges_output(&self) -> bool {
        self.stdout_path.is_some() && self.stdout_path == self.stderr_path
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("JobSpec serialization is infallible")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processes_per_node: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_cores_per_process: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_cores_per_process: Option<u32>,
    /// `None` leaves node sharing to the scheduler's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusive_node_use: Option<bool>,
}

impl ResourceSpec {
    pub fn is_empty(&self) -> bool {
        self == &ResourceSpec::default()
    }

    /// Total process count, when the request determines one.
    pub fn total_processes(&self) -> Option<u32> {
        self.process_count.or_else(|| {
            self.node_count
                .zip(self.processes_per_node)
                .and_then(|(n, p)| n.checked_mul(p))
        })
    }

    /// Processes per node, when the request determines one.
    pub fn per_node(&self) -> Option<u32> {
        self.processes_per_node.or_else(|| match (self.process_count, self.node_count) {
            (Some(total), Some(nodes)) if nodes > 0 && total % nodes == 0 => Some(total / nodes),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobAttributes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<WallTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub account: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reservation: Option<String>,
    /// Send stdout and stderr to the same file. Required when
    /// `stdout_path == stderr_path`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub merge_output: bool,
    /// Scheduler-specific directives, rendered verbatim.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub custom: BTreeMap<String, String>,
}

impl JobAttributes {
    pub fn is_empty(&self) -> bool {
        self == &JobAttributes::default()
    }
}

/// Wall-clock time request with millisecond resolution.
///
/// Parsed from and rendered to ISO-8601 durations (`PT10M`, `P1DT2H`,
/// `PT1.5S`, `P2W`). Years and months are rejected since their length is
/// calendar dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WallTime(Duration);

pub const MAX_WALL_TIME: Duration = Duration::from_secs(365 * 24 * 3600);

impl WallTime {
    pub fn from_duration(d: Duration) -> Self {
        WallTime(Duration::from_millis(d.as_millis() as u64))
    }

    pub fn from_secs(secs: u64) -> Self {
        WallTime(Duration::from_secs(secs))
    }

    pub fn as_duration(self) -> Duration {
        self.0
    }

    /// Whole seconds, rounded up.
    pub fn ceil_secs(self) -> u64 {
        let ms = self.0.as_millis() as u64;
        ms.div_ceil(1000)
    }

    /// `HH:MM:SS` with hours allowed to exceed 24.
    pub fn hms(self) -> String {
        let s = self.ceil_secs();
        format!("{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
    }

    /// Whole minutes, rounded up, at least one.
    pub fn ceil_minutes(self) -> u64 {
        self.ceil_secs().div_ceil(60).max(1)
    }
}

impl fmt::Display for WallTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total_ms = self.0.as_millis() as u64;
        if total_ms == 0 {
            return f.write_str("PT0S");
        }
        let days = total_ms / 86_400_000;
        let hours = (total_ms / 3_600_000) % 24;
        let minutes = (total_ms / 60_000) % 60;
        let ms = total_ms % 60_000;
        f.write_str("P")?;
        if days > 0 {
            write!(f, "{days}D")?;
        }
        if hours == 0 && minutes == 0 && ms == 0 {
            return Ok(());
        }
        f.write_str("T")?;
        if hours > 0 {
            write!(f, "{hours}H")?;
        }
        if minutes > 0 {
            write!(f, "{minutes}M")?;
        }
        if ms > 0 {
            if ms.is_multiple_of(1000) {
                write!(f, "{}S", ms / 1000)?;
            } else {
                let frac = format!("{:03}", ms % 1000);
                write!(f, "{}.{}S", ms / 1000, frac.trim_end_matches('0'))?;
            }
        }
        Ok(())
    }
}

impl FromStr for WallTime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("invalid ISO-8601 duration {s:?}");
        let rest = s.strip_prefix('P').ok_or_else(bad)?;
        if rest.is_empty() {
            return Err(bad());
        }
        let (date, time) = match rest.split_once('T') {
            Some((_, "")) => return Err(bad()),
            Some((d, t)) => (d, Some(t)),
            None => (rest, None),
        };

        let mut total_ms: u128 = 0;
        let mut take = |part: &str, units: &[(char, u128)], allow_fraction: bool| {
            let mut num = String::new();
            let mut last_unit = 0usize;
            for c in part.chars() {
                if c.is_ascii_digit() || (allow_fraction && (c == '.' || c == ',')) {
                    num.push(if c == ',' { '.' } else { c });
                    continue;
                }
                let pos = units.iter().position(|(u, _)| *u == c).ok_or_else(|| {
                    if matches!(c, 'Y' | 'M') {
                        format!("{s:?}: years and months are not fixed-length durations")
                    } else {
                        bad()
                    }
                })?;
                if num.is_empty() || pos < last_unit {
                    return Err(bad());
                }
                last_unit = pos + 1;
                let ms_per_unit = units[pos].1;
                let value: u128 = if let Some((whole, frac)) = num.split_once('.') {
                    if c != 'S' || frac.is_empty() || frac.len() > 3 {
                        return Err(bad());
                    }
                    let whole: u128 = whole.parse().map_err(|_| bad())?;
                    let frac_ms: u128 = format!("{frac:0<3}").parse().map_err(|_| bad())?;
                    whole * ms_per_unit + frac_ms
                } else {
                    num.parse::<u128>().map_err(|_| bad())? * ms_per_unit
                };
                total_ms = total_ms.checked_add(value).ok_or_else(bad)?;
                num.clear();
            }
            if num.is_empty() {
                Ok(())
            } else {
                Err(bad())
            }
        };
        take(date, &[('W', 604_800_000), ('D', 86_400_000)], false)?;
        if let Some(time) = time {
            take(time, &[('H', 3_600_000), ('M', 60_000), ('S', 1000)], true)?;
        }
        let ms = u64::try_from(total_ms).map_err(|_| bad())?;
        Ok(WallTime(Duration::from_millis(ms)))
    }
}

impl Serialize for WallTime {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WallTime {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One broken invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every field invariant of `spec`. An empty result means the spec is
/// valid.
pub fn validate_spec(spec: &JobSpec) -> Vec<Violation> {
    let mut out = Vec::new();

    if spec.executable.is_empty() {
        out.push(Violation::new("executable", "executable empty"));
    }
    if let Some(dir) = &spec.directory {
        if !dir.is_absolute() {
            out.push(Violation::new(
                "directory",
                format!("directory {} is not absolute", dir.display()),
            ));
        }
    }
    if spec.merges_output() && !spec.attributes.merge_output {
        out.push(Violation::new(
            "stderr_path",
            "stdout_path and stderr_path are equal but attributes.merge_output is not set",
        ));
    }
    for key in spec.environment_overrides.keys() {
        if key.is_empty() {
            out.push(Violation::new("environment_overrides", "empty variable name"));
        } else if key.contains('=') || key.contains('\0') {
            out.push(Violation::new(
                "environment_overrides",
                format!("variable name {key:?} contains '=' or NUL"),
            ));
        }
    }

    let r = &spec.resources;
    for (field, value) in [
        ("resources.node_count", r.node_count),
        ("resources.processes_per_node", r.processes_per_node),
        ("resources.process_count", r.process_count),
        ("resources.cpu_cores_per_process", r.cpu_cores_per_process),
    ] {
        if value == Some(0) {
            out.push(Violation::new(field, "must be positive"));
        }
    }
    if let (Some(n), Some(p), Some(total)) = (r.node_count, r.processes_per_node, r.process_count) {
        if u64::from(n) * u64::from(p) != u64::from(total) {
            out.push(Violation::new(
                "resources.process_count",
                format!("product relation {n}×{p}≠{total}"),
            ));
        }
    }

    if let Some(d) = spec.attributes.duration {
        if d.as_duration().is_zero() {
            out.push(Violation::new("attributes.duration", "duration must be positive"));
        } else if d.as_duration() > MAX_WALL_TIME {
            out.push(Violation::new(
                "attributes.duration",
                format!("duration {d} exceeds 365 days"),
            ));
        }
    }
    out
}
