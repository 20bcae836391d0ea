use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

/// Lifecycle state of a job.
///
/// The legal transitions are:
///
/// ```text
/// NEW -> QUEUED
/// QUEUED -> ACTIVE | CANCELED | FAILED
/// ACTIVE -> COMPLETED | FAILED | CANCELED
/// ```
///
/// `COMPLETED`, `FAILED` and `CANCELED` are terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    New,
    Queued,
    Active,
    Completed,
    Failed,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        JobState::New,
        JobState::Queued,
        JobState::Active,
        JobState::Completed,
        JobState::Failed,
        JobState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Completed | JobState::Failed | JobState::Canceled
        )
    }

    /// Whether `self -> to` is an edge of the transition graph.
    pub fn can_transition_to(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (New, Queued)
                | (Queued, Active)
                | (Queued, Canceled)
                | (Queued, Failed)
                | (Active, Completed)
                | (Active, Failed)
                | (Active, Canceled)
        )
    }

    /// Shortest walk from `self` to `to`, excluding `self`.
    ///
    /// Pollers use this to fill in states the scheduler skipped between two
    /// observations (a job that was queued at one poll and finished by the
    /// next still has to pass through `ACTIVE`). Returns `None` when `to` is
    /// unreachable.
    pub fn path_to(self, to: JobState) -> Option<Vec<JobState>> {
        if self == to {
            return Some(Vec::new());
        }
        let mut prev: [Option<JobState>; 6] = [None; 6];
        let mut seen = [false; 6];
        let mut queue = std::collections::VecDeque::from([self]);
        seen[self as usize] = true;
        while let Some(s) = queue.pop_front() {
            for next in JobState::ALL {
                if !seen[next as usize] && s.can_transition_to(next) {
                    seen[next as usize] = true;
                    prev[next as usize] = Some(s);
                    if next == to {
                        let mut path = vec![to];
                        let mut cur = to;
                        while let Some(p) = prev[cur as usize] {
                            if p == self {
                                break;
                            }
                            path.push(p);
                            cur = p;
                        }
                        path.reverse();
                        return Some(path);
                    }
                    queue.push_back(next);
                }
            }
        }
        None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::New => "NEW",
            JobState::Queued => "QUEUED",
            JobState::Active => "ACTIVE",
            JobState::Completed => "COMPLETED",
            JobState::Failed => "FAILED",
            JobState::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

/// A timestamped observation of a job's state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub state: JobState,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl JobStatus {
    pub fn new(state: JobState) -> Self {
        JobStatus {
            state,
            timestamp: Utc::now().trunc_subsecs(3),
            exit_code: None,
            message: None,
            metadata: BTreeMap::new(),
        }
    }

    /// Terminal status for a process that exited with `code`.
    pub fn exited(code: i32) -> Self {
        let state = if code == 0 {
            JobState::Completed
        } else {
            JobState::Failed
        };
        JobStatus::new(state).with_exit_code(code)
    }

    pub fn with_exit_code(mut self, code: i32) -> Self {
        self.exit_code = Some(code);
        self
    }

    pub fn with_message(mut self, message: impl Into<String>) -> Self {
        self.message = Some(message.into());
        self
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    /// Checks the exit-code invariants.
    pub fn check(&self) -> Result<(), String> {
        match (self.state, self.exit_code) {
            (JobState::Completed, Some(code)) if code != 0 => {
                Err(format!("COMPLETED status carries non-zero exit code {code}"))
            }
            (JobState::Completed | JobState::Failed, _) | (_, None) => Ok(()),
            (state, Some(code)) => Err(format!("{state} status carries exit code {code}")),
        }
    }
}
