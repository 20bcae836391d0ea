use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Profile, Result};

/// Native state of a simulated job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    #[serde(rename = "PD")]
    Pending,
    #[serde(rename = "R")]
    Running,
    #[serde(rename = "CD")]
    Completed,
    #[serde(rename = "F")]
    Failed,
    #[serde(rename = "CA")]
    Cancelled,
}

impl Token {
    pub fn as_str(self) -> &'static str {
        match self {
            Token::Pending => "PD",
            Token::Running => "R",
            Token::Completed => "CD",
            Token::Failed => "F",
            Token::Cancelled => "CA",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Token::Completed | Token::Failed | Token::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub token: Token,
    pub at_ms: u64,
}

/// Everything the mock knows about one job. Also the ledger entry format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: u64,
    pub profile: Profile,
    pub name: Option<String>,
    pub queue: Option<String>,
    pub script: PathBuf,
    pub cwd: PathBuf,
    pub output: PathBuf,
    pub error: PathBuf,
    pub inherit_env: bool,
    pub submit_ms: u64,
    pub queue_latency_ms: u64,
    pub run_latency_ms: u64,
    pub token: Token,
    pub history: Vec<Transition>,
    pub start_ms: Option<u64>,
    pub end_ms: Option<u64>,
    pub exit_code: Option<i32>,
    pub pgid: Option<i32>,
}

impl JobRecord {
    pub fn set_token(&mut self, token: Token, at_ms: u64) {
        self.token = token;
        self.history.push(Transition { token, at_ms });
        match token {
            Token::Running => self.start_ms = Some(at_ms),
            t if t.is_terminal() => self.end_ms = Some(at_ms),
            _ => {}
        }
    }
}

/// Invocation counts per command kind, faulted calls included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub submit: u64,
    pub status: u64,
    pub cancel: u64,
}

/// Remaining injected faults per kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub submit: u32,
    pub status: u32,
    pub cancel: u32,
    pub status_corrupt: u32,
}

impl FaultPlan {
    /// Parses `kind:count[,kind:count...]` where kind is one of `submit`,
    /// `status`, `cancel`, `status-corrupt`.
    pub fn parse(spec: &str) -> Result<FaultPlan> {
        let mut plan = FaultPlan::default();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (kind, count) = item
                .split_once(':')
                .ok_or_else(|| Error::Usage(format!("fault {item:?} is not kind:count")))?;
            let count: u32 = count
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("fault count {count:?} is not a number")))?;
            let slot = match kind.trim() {
                "submit" => &mut plan.submit,
                "status" => &mut plan.status,
                "cancel" => &mut plan.cancel,
                "status-corrupt" => &mut plan.status_corrupt,
                other => return Err(Error::Usage(format!("unknown fault kind {other:?}"))),
            };
            *slot += count;
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub next_id: u64,
    pub jobs: BTreeMap<u64, JobRecord>,
    pub counters: Counters,
    pub faults: FaultPlan,
    /// The `MOCK_LRM_FAULTS` value `faults` was last loaded from.
    pub faults_source: Option<String>,
    /// Virtual clock reading; tracks wall time in wall-clock mode.
    pub clock_ms: u64,
}

/// Exclusive lock on a state directory, held until dropped.
pub struct DirLock {
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join("lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        // SAFETY: valid open descriptor for the lifetime of `file`.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
        if rc != 0 {
            return Err(Error::io(&path, io::Error::last_os_error()));
        }
        Ok(DirLock { _file: file })
    }
}

pub fn state_path(dir: &Path) -> PathBuf {
    dir.join("state.json")
}

pub fn load(dir: &Path) -> Result<State> {
    let path = state_path(dir);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(State {
            next_id: 1,
            ..State::default()
        }),
        Err(e) => Err(Error::io(&path, e)),
    }
}

pub fn save(dir: &Path, state: &State) -> Result<()> {
    let path = state_path(dir);
    let tmp = dir.join("state.json.tmp");
    let bytes = serde_json::to_vec(state).expect("state serializes");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}
