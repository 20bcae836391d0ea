use std::path::PathBuf;

use crate::job::{JobState, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("illegal state transition {from} -> {to}")]
    IllegalTransition { from: JobState, to: JobState },

    #[error("malformed status: {0}")]
    InvalidStatus(String),

    #[error("invalid job specification: {}", join_violations(.0))]
    InvalidSpec(Vec<Violation>),

    #[error("cannot {operation} a job in state {state}: {reason}")]
    InvalidJobState {
        operation: &'static str,
        state: JobState,
        reason: String,
    },

    #[error("plugin {name} {version} is already registered")]
    DuplicatePlugin { name: String, version: semver::Version },

    #[error("invalid plugin descriptor: {0}")]
    InvalidPlugin(String),

    #[error("no executor named {0:?} is registered")]
    UnknownExecutor(String),

    #[error("no launcher named {0:?} is registered")]
    UnknownLauncher(String),

    #[error("invalid executor configuration: {0}")]
    InvalidConfig(String),

    #[error("submit failed: {message}")]
    SubmitFailed { message: String, stderr: String },

    #[error("submit command succeeded but no job id could be parsed from {0:?}")]
    UnparseableSubmitOutput(String),

    #[error("unknown native job id {0:?}")]
    UnknownNativeId(String),

    #[error("scheduler unavailable: {0}")]
    SchedulerUnavailable(String),

    #[error("cancel rejected by scheduler: {0}")]
    CancelRejected(String),

    #[error("timed out waiting for job")]
    Timeout,

    #[error("cannot render attribute {key:?}: {reason}")]
    UnrenderableAttribute { key: String, reason: String },

    #[error("launcher {launcher} needs {placeholder}, which the resource request does not determine")]
    UnresolvablePlaceholder {
        launcher: String,
        placeholder: &'static str,
    },

    #[error("failed to spawn job: {0}")]
    SpawnFailed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
