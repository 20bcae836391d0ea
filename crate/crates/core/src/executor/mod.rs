//! The executor abstraction and its plugin registry.
//!
//! An executor binds the uniform job API to one execution mechanism. Several
//! executors, of the same or different kinds, can live in one process; each
//! owns its own background thread that polls its scheduler in bulk and
//! dispatches status callbacks.

mod batch;
mod registry;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use batch::{BatchExecutor, ExecutorStats, ABSENT_GRACE_CYCLES, MAX_WINDOW_BATCH, UNKNOWN_TOKEN_LIMIT};
pub use registry::{
    builtin_factory, plugin_search_path, DiscoveryReport, ExecutorDescriptor, ExecutorFactory,
    PluginKind, PluginManifest, Registry, PLUGIN_PATH_ENV,
};

use crate::error::{Error, Result};
use crate::job::{Job, JobSpec, JobStatus, StatusCallback, Violation};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(5);
pub const DEFAULT_FAILURE_LIMIT: u32 = 10;

/// Per-instance executor settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    #[serde(with = "humantime_serde")]
    pub poll_interval: Duration,
    /// Aggregate submissions arriving within this window into one scheduler
    /// call. `None` submits immediately.
    #[serde(with = "humantime_serde", skip_serializing_if = "Option::is_none")]
    pub submit_window: Option<Duration>,
    /// Prepended verbatim to every scheduler command line.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub command_prefix: Vec<String>,
    /// Generated scripts, exit-code files and job records go here.
    pub work_directory: PathBuf,
    /// Consecutive failed status queries before all tracked jobs fail.
    pub failure_limit: u32,
    #[serde(with = "humantime_serde")]
    pub command_timeout: Duration,
    /// Overrides the scheduler profile's bulk-submit capability.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bulk_submit: Option<bool>,
    /// Scheduler grammar emulated by the `mock` executor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            poll_interval: DEFAULT_POLL_INTERVAL,
            submit_window: None,
            command_prefix: Vec::new(),
            work_directory: default_work_directory(),
            failure_limit: DEFAULT_FAILURE_LIMIT,
            command_timeout: crate::lrm::DEFAULT_COMMAND_TIMEOUT,
            bulk_submit: None,
            profile: None,
        }
    }
}

fn default_work_directory() -> PathBuf {
    dirs::home_dir()
        .map(|h| h.join(".psij").join("work"))
        .unwrap_or_else(|| std::env::temp_dir().join("psij-work"))
}

impl ExecutorConfig {
    pub fn with_work_directory(mut self, dir: impl Into<PathBuf>) -> Self {
        self.work_directory = dir.into();
        self
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    pub fn with_submit_window(mut self, window: Option<Duration>) -> Self {
        self.submit_window = window;
        self
    }

    pub fn with_command_prefix<I, S>(mut self, prefix: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.command_prefix = prefix.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.poll_interval.is_zero() {
            return Err(Error::InvalidConfig("poll_interval must be positive".into()));
        }
        if self.submit_window.is_some_and(|w| w.is_zero()) {
            return Err(Error::InvalidConfig("submit_window must be positive".into()));
        }
        if self.failure_limit == 0 {
            return Err(Error::InvalidConfig("failure_limit must be at least 1".into()));
        }
        if self.command_timeout.is_zero() {
            return Err(Error::InvalidConfig("command_timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform job operations over one execution mechanism.
pub trait Executor: Send + Sync {
    fn name(&self) -> &str;

    fn config(&self) -> &ExecutorConfig;

    /// Executor-specific checks on top of [`crate::job::validate_spec`].
    fn validate(&self, spec: &JobSpec) -> Vec<Violation> {
        crate::job::validate_spec(spec)
    }

    /// Submits a `NEW` job. On return the job has a native id and is at
    /// least `QUEUED`, unless a submit window defers the scheduler call, in
    /// which case both happen when the window flushes.
    fn submit(&self, job: &Job) -> Result<()>;

    /// Requests cancellation. The job reaches `CANCELED`, or whichever
    /// terminal state won the race, asynchronously.
    fn cancel(&self, job: &Job) -> Result<()>;

    /// Reconstructs a handle for a job this process did not submit.
    fn attach(&self, native_id: &str) -> Result<Job> {
        self.attach_many(&[native_id])
            .pop()
            .expect("one result per id")
    }

    /// Attaches to several jobs with a single status query.
    fn attach_many(&self, native_ids: &[&str]) -> Vec<Result<Job>>;

    /// Runs one monitoring cycle now and returns the number of transitions
    /// recorded. The background thread calls this every poll interval.
    fn poll_cycle(&self) -> Result<usize>;

    /// Registers a callback for every job of this executor.
    fn add_callback(&self, callback: Arc<dyn StatusCallback>);
}

/// Fan-out from a job to its executor's callbacks.
#[derive(Default)]
pub(crate) struct CallbackList {
    callbacks: Mutex<Vec<Arc<dyn StatusCallback>>>,
}

impl CallbackList {
    pub(crate) fn push(&self, cb: Arc<dyn StatusCallback>) {
        self.callbacks
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(cb);
    }
}

impl StatusCallback for CallbackList {
    fn job_status_changed(&self, job: &Job, status: &JobStatus) {
        let callbacks = self
            .callbacks
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone();
        for cb in callbacks {
            cb.job_status_changed(job, status);
        }
    }
}

/// Blocks until `job` is terminal. Alias of [`Job::wait`].
pub fn wait(job: &Job, timeout: Option<Duration>) -> Result<JobStatus> {
    job.wait(timeout)
}
