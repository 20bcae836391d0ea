#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use psij_core::{Executor, ExecutorConfig, Job, JobSpec, JobState, JobStatus, Registry};
use psij_mock_lrm::{MockLrm, Settings};
use tempfile::TempDir;

pub fn mock_bin() -> &'static str {
    env!("CARGO_BIN_EXE_mock-lrm")
}

pub fn psij_bin() -> &'static str {
    env!("CARGO_BIN_EXE_psij")
}

/// A private mock scheduler state directory plus a work directory.
pub struct MockSite {
    pub state: TempDir,
    pub work: TempDir,
    env: Vec<(String, String)>,
}

impl MockSite {
    pub fn new() -> Self {
        MockSite {
            state: tempfile::tempdir().unwrap(),
            work: tempfile::tempdir().unwrap(),
            env: Vec::new(),
        }
    }

    /// Extra `MOCK_LRM_*` variables passed to every scheduler command.
    pub fn with_env(mut self, name: &str, value: &str) -> Self {
        self.env.push((name.into(), value.into()));
        self
    }

    pub fn prefix(&self) -> Vec<String> {
        let mut p = vec!["env".to_string(), format!("MOCK_LRM_DIR={}", self.state.path().display())];
        p.extend(self.env.iter().map(|(k, v)| format!("{k}={v}")));
        p.push(mock_bin().to_string());
        p
    }

    pub fn config(&self, poll: Duration) -> ExecutorConfig {
        ExecutorConfig::default()
            .with_work_directory(self.work.path())
            .with_poll_interval(poll)
            .with_command_prefix(self.prefix())
    }

    /// `kind` is a registry name: `mock` (with `profile`) or one of the
    /// native adapters pointed at the mock binary.
    pub fn executor(&self, kind: &str, profile: &str, config: ExecutorConfig) -> Box<dyn Executor> {
        let mut config = config;
        if kind == "mock" {
            config.profile = Some(profile.to_string());
        }
        Registry::with_builtins().get_executor(kind, &config).unwrap()
    }

    /// Direct handle on the scheduler state for ground truth.
    pub fn lrm(&self) -> MockLrm {
        let mut s = Settings::new(self.state.path());
        for (k, v) in &self.env {
            if k == "MOCK_LRM_CLOCK" && v == "virtual" {
                s = s.with_clock(psij_mock_lrm::ClockMode::Virtual);
            }
        }
        MockLrm::new(s).unwrap()
    }
}

pub fn sh(script: &str) -> JobSpec {
    JobSpec::new("/bin/sh").args(["-c", script])
}

pub fn wait_all(jobs: &[Job], timeout: Duration) -> Vec<JobStatus> {
    let deadline = Instant::now() + timeout;
    jobs.iter()
        .map(|j| {
            let left = deadline.saturating_duration_since(Instant::now());
            j.wait(Some(left))
                .unwrap_or_else(|_| panic!("job {} still {} after {timeout:?}", j.id(), j.state()))
        })
        .collect()
}

pub fn expected(k: i32) -> (JobState, Option<i32>) {
    if k == 0 {
        (JobState::Completed, Some(0))
    } else {
        (JobState::Failed, Some(k))
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}
