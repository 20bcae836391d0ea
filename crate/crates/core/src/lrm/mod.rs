//! Adapters over the public command-line interfaces of Slurm, PBS and LSF.
//!
//! Everything here is stateless: argv construction, output parsing and native
//! state translation. [`crate::executor::BatchExecutor`] drives these
//! functions from its poll loop.

mod command;
pub mod exit_code;
mod script;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use command::{CommandOutput, CommandRunner, DEFAULT_COMMAND_TIMEOUT};
pub use script::{render_submit_script, shell_quote, ScriptContext};

use crate::error::{Error, Result};
use crate::job::JobState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Slurm,
    Pbs,
    Lsf,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 3] = [SchedulerKind::Slurm, SchedulerKind::Pbs, SchedulerKind::Lsf];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Slurm => "slurm",
            SchedulerKind::Pbs => "pbs",
            SchedulerKind::Lsf => "lsf",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scheduler profile {s:?}")))
    }
}

/// Command templates and output grammar for one scheduler.
#[derive(Debug, Clone)]
pub struct SchedulerProfile {
    pub kind: SchedulerKind,
    pub submit_command: Vec<String>,
    /// Fixed part of the bulk status command; job ids are appended.
    pub status_command: Vec<String>,
    pub cancel_command: Vec<String>,
    pub directive_prefix: String,
    /// One capture group extracting the job id from submit stdout.
    pub native_id_pattern: Regex,
    pub state_map: BTreeMap<String, JobState>,
    /// Lower-case fragments of cancel output meaning "job already gone".
    pub cancel_rejections: Vec<String>,
    /// Whether one submit invocation accepts several scripts.
    pub bulk_submit: bool,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn state_map(entries: &[(&[&str], JobState)]) -> BTreeMap<String, JobState> {
    entries
        .iter()
        .flat_map(|(tokens, state)| tokens.iter().map(move |t| (t.to_string(), *state)))
        .collect()
}

const CANCEL_REJECTIONS: &[&str] = &[
    "unknown job",
    "invalid job id",
    "already completing or completed",
    "job has finished",
    "job has already finished",
    "no matching job",
];

impl SchedulerProfile {
    pub fn new(kind: SchedulerKind) -> Self {
        use JobState::*;
        let (submit, status, cancel, prefix, pattern, map) = match kind {
            SchedulerKind::Slurm => (
                strings(&["sbatch"]),
                strings(&["squeue", "--noheader", "--states=all", "--format=%i %t"]),
                strings(&["scancel"]),
                "#SBATCH",
                r"Submitted batch job (\d+)",
                state_map(&[
                    (&["PD", "CF", "RD", "RF", "RH", "RQ"], Queued),
                    (&["R", "CG", "S", "ST", "SI", "SO", "RS"], Active),
                    (&["CD"], Completed),
                    (&["F", "TO", "NF", "OOM", "PR", "BF", "DL", "SE", "RV"], Failed),
                    (&["CA"], Canceled),
                ]),
            ),
            SchedulerKind::Pbs => (
                strings(&["qsub"]),
                strings(&["qstat", "-x", "-f", "-F", "json"]),
                strings(&["qdel"]),
                "#PBS",
                r"(?m)^\s*(\d+(?:\.[A-Za-z0-9_-]+)*)\s*$",
                state_map(&[
                    (&["Q", "H", "W", "T", "M"], Queued),
                    (&["R", "E", "S", "U", "B"], Active),
                    (&["F", "X"], Completed),
                ]),
            ),
            SchedulerKind::Lsf => (
                strings(&["bsub"]),
                strings(&["bjobs", "-noheader", "-o", "jobid stat exit_code delimiter='|'"]),
                strings(&["bkill"]),
                "#BSUB",
                r"Job <(\d+)> is submitted",
                state_map(&[
                    (&["PEND", "PSUSP", "WAIT"], Queued),
                    (&["RUN", "USUSP", "SSUSP", "PROV"], Active),
                    (&["DONE"], Completed),
                    (&["EXIT", "ZOMBI"], Failed),
                ]),
            ),
        };
        let profile = SchedulerProfile {
            kind,
            submit_command: submit,
            status_command: status,
            cancel_command: cancel,
            directive_prefix: prefix.to_string(),
            native_id_pattern: Regex::new(pattern).expect("built-in pattern compiles"),
            state_map: map,
            cancel_rejections: strings(CANCEL_REJECTIONS),
            bulk_submit: false,
        };
        debug_assert!(profile.check().is_ok());
        profile
    }

    pub fn slurm() -> Self {
        Self::new(SchedulerKind::Slurm)
    }

    pub fn pbs() -> Self {
        Self::new(SchedulerKind::Pbs)
    }

    pub fn lsf() -> Self {
        Self::new(SchedulerKind::Lsf)
    }

    pub fn with_bulk_submit(mut self, enabled: bool) -> Self {
        self.bulk_submit = enabled;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.native_id_pattern.captures_len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "{}: native id pattern must have exactly one capture group",
                self.kind
            )));
        }
        Ok(())
    }

    /// Argv submitting `scripts`, and the file to feed on stdin if any.
    ///
    /// LSF reads a single script from stdin (`bsub < script`); everything
    /// else passes script paths as arguments.
    pub fn submit_argv(&self, scripts: &[PathBuf]) -> (Vec<String>, Option<PathBuf>) {
        if self.kind == SchedulerKind::Lsf && scripts.len() == 1 {
            return (self.submit_command.clone(), Some(scripts[0].clone()));
        }
        let mut argv = self.submit_command.clone();
        argv.extend(scripts.iter().map(|p| p.display().to_string()));
        (argv, None)
    }

    pub fn status_argv(&self, native_ids: &[&str]) -> Vec<String> {
        let mut argv = self.status_command.clone();
        match self.kind {
            SchedulerKind::Slurm => argv.push(format!("--jobs={}", native_ids.join(","))),
            SchedulerKind::Pbs | SchedulerKind::Lsf => {
                argv.extend(native_ids.iter().map(|s| s.to_string()))
            }
        }
        argv
    }

    pub fn cancel_argv(&self, native_id: &str) -> Vec<String> {
        let mut argv = self.cancel_command.clone();
        argv.push(native_id.to_string());
        argv
    }

    /// Translates one native observation.
    pub fn classify(&self, obs: &Observation) -> NativeStatus {
        let Some(&state) = self.state_map.get(&obs.token) else {
            return NativeStatus::Unknown {
                token: obs.token.clone(),
            };
        };
        // PBS reports 256 + signal for jobs the server killed, which in
        // practice means qdel.
        let state = match (self.kind, state, obs.exit_code) {
            (SchedulerKind::Pbs, JobState::Completed, Some(code)) if code >= 256 => {
                JobState::Canceled
            }
            _ => state,
        };
        NativeStatus::Known {
            state,
            token: obs.token.clone(),
            exit_code: obs.exit_code,
        }
    }

    /// Parses bulk status output into raw observations keyed by native id.
    pub fn parse_status_output(&self, stdout: &str) -> Result<HashMap<String, Observation>> {
        let mut out = HashMap::new();
        match self.kind {
            SchedulerKind::Slurm => {
                for line in stdout.lines() {
                    let mut fields = line.split_whitespace();
                    if let (Some(id), Some(token)) = (fields.next(), fields.next()) {
                        out.insert(
                            id.to_string(),
                            Observation {
                                token: token.to_string(),
                                exit_code: None,
                            },
                        );
                    }
                }
            }
            SchedulerKind::Lsf => {
                for line in stdout.lines() {
                    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
                    if fields.len() < 2 || fields[0].is_empty() {
                        continue;
                    }
                    out.insert(
                        fields[0].to_string(),
                        Observation {
                            token: fields[1].to_string(),
                            exit_code: fields.get(2).and_then(|c| c.parse().ok()),
                        },
                    );
                }
            }
            SchedulerKind::Pbs => {
                if stdout.trim().is_empty() {
                    return Ok(out);
                }
                #[derive(Deserialize)]
                struct Qstat {
                    #[serde(rename = "Jobs", default)]
                    jobs: BTreeMap<String, QstatJob>,
                }
                #[derive(Deserialize)]
                struct QstatJob {
                    job_state: String,
                    #[serde(rename = "Exit_status")]
                    exit_status: Option<i32>,
                }
                let parsed: Qstat = serde_json::from_str(stdout).map_err(|e| {
                    Error::SchedulerUnavailable(format!("unparseable qstat output: {e}"))
                })?;
                for (id, job) in parsed.jobs {
                    out.insert(
                        id,
                        Observation {
                            token: job.job_state,
                            exit_code: job.exit_status,
                        },
                    );
                }
            }
        }
        Ok(out)
    }
}

/// A raw scheduler observation before translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub token: String,
    pub exit_code: Option<i32>,
}

/// Result of a bulk status query for one native id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NativeStatus {
    Known {
        state: JobState,
        token: String,
        exit_code: Option<i32>,
    },
    /// The scheduler reported a token the state map does not cover.
    Unknown { token: String },
    /// Not present in the scheduler's output; resolve via exit-code files.
    Absent,
}

/// Extracts the native id from submit stdout.
pub fn parse_native_id(submit_stdout: &str, profile: &SchedulerProfile) -> Result<String> {
    profile
        .native_id_pattern
        .captures(submit_stdout)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str().trim().to_string())
        .filter(|id| !id.is_empty())
        .ok_or_else(|| Error::UnparseableSubmitOutput(submit_stdout.to_string()))
}

/// All native ids in submit stdout, in output order.
pub fn parse_native_ids(submit_stdout: &str, profile: &SchedulerProfile) -> Vec<String> {
    profile
        .native_id_pattern
        .captures_iter(submit_stdout)
        .filter_map(|c| c.get(1))
        .map(|m| m.as_str().trim().to_string())
        .filter(|id| !id.is_empty())
        .collect()
}

fn first_line(text: &str) -> &str {
    text.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim()
}

/// Submits `scripts` in one invocation and returns the native ids printed,
/// in order. The caller decides what to do if fewer ids than scripts come
/// back.
pub fn submit(
    profile: &SchedulerProfile,
    runner: &CommandRunner,
    scripts: &[PathBuf],
) -> Result<Vec<String>> {
    let (argv, stdin) = profile.submit_argv(scripts);
    let out = runner
        .run(&argv, stdin.as_deref())
        .map_err(|e| Error::SubmitFailed {
            message: e,
            stderr: String::new(),
        })?;
    if !out.success() {
        let detail = first_line(&out.stderr);
        return Err(Error::SubmitFailed {
            message: match out.code {
                Some(code) if detail.is_empty() => format!("{} exited with {code}", argv[0]),
                Some(code) => format!("{} exited with {code}: {detail}", argv[0]),
                None => format!("{} was killed by a signal", argv[0]),
            },
            stderr: out.stderr,
        });
    }
    if !out.stderr.trim().is_empty() {
        log::warn!("{} succeeded with stderr: {}", argv[0], out.stderr.trim());
    }
    let ids = parse_native_ids(&out.stdout, profile);
    if ids.is_empty() {
        return Err(Error::UnparseableSubmitOutput(out.stdout));
    }
    Ok(ids)
}

/// Queries all `native_ids` with one status invocation. Empty input runs
/// nothing.
pub fn bulk_status(
    profile: &SchedulerProfile,
    runner: &CommandRunner,
    native_ids: &[&str],
) -> Result<HashMap<String, NativeStatus>> {
    if native_ids.is_empty() {
        return Ok(HashMap::new());
    }
    let argv = profile.status_argv(native_ids);
    let out = runner.run(&argv, None).map_err(Error::SchedulerUnavailable)?;
    if !out.success() {
        return Err(Error::SchedulerUnavailable(format!(
            "{} exited with {}: {}",
            argv[0],
            out.code.map_or("signal".to_string(), |c| c.to_string()),
            first_line(&out.stderr)
        )));
    }
    let observed = profile.parse_status_output(&out.stdout)?;
    Ok(native_ids
        .iter()
        .map(|id| {
            let status = observed
                .get(*id)
                .map_or(NativeStatus::Absent, |obs| profile.classify(obs));
            (id.to_string(), status)
        })
        .collect())
}

/// Issues one cancel command. Terminality is left to later polls.
///
/// A rejection that says the job is already gone comes back as
/// [`Error::CancelRejected`], which callers treat as success.
pub fn request_cancel(
    profile: &SchedulerProfile,
    runner: &CommandRunner,
    native_id: &str,
) -> Result<()> {
    if native_id.is_empty() {
        return Err(Error::UnknownNativeId(String::new()));
    }
    let argv = profile.cancel_argv(native_id);
    let out = runner.run(&argv, None).map_err(Error::SchedulerUnavailable)?;
    if out.success() {
        return Ok(());
    }
    let text = format!("{}\n{}", out.stdout, out.stderr).to_lowercase();
    if profile.cancel_rejections.iter().any(|p| text.contains(p.as_str())) {
        return Err(Error::CancelRejected(first_line(&out.stderr).to_string()));
    }
    Err(Error::SchedulerUnavailable(format!(
        "{} exited with {}: {}",
        argv[0],
        out.code.map_or("signal".to_string(), |c| c.to_string()),
        first_line(&out.stderr)
    )))
}
