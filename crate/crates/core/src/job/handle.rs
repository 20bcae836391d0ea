use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use uuid::Uuid;

use super::{JobSpec, JobState, JobStatus};
use crate::error::{Error, Result};

/// Receives every genuine state transition of a job.
///
/// Calls for one job are serialized and arrive in transition order. They run
/// on the dispatching executor's thread and must not block.
pub trait StatusCallback: Send + Sync {
    fn job_status_changed(&self, job: &Job, status: &JobStatus);
}

impl<F> StatusCallback for F
where
    F: Fn(&Job, &JobStatus) + Send + Sync,
{
    fn job_status_changed(&self, job: &Job, status: &JobStatus) {
        self(job, status)
    }
}

/// Shared handle to one job. Clones refer to the same job.
#[derive(Clone)]
pub struct Job {
    inner: Arc<Inner>,
}

struct Inner {
    id: Uuid,
    spec: Option<JobSpec>,
    native_id: OnceLock<String>,
    executor: OnceLock<String>,
    submitted: AtomicBool,
    record: Mutex<Record>,
    changed: Condvar,
    // Held across a transition and its callbacks so dispatch is serial per job.
    dispatch: Mutex<()>,
    listeners: Mutex<Vec<Arc<dyn StatusCallback>>>,
}

struct Record {
    current: JobStatus,
    history: Vec<JobStatus>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Job {
    pub fn new(spec: JobSpec) -> Self {
        Self::build(Uuid::new_v4(), Some(spec))
    }

    /// Like [`Job::new`] with a caller-chosen client id.
    pub fn with_id(id: Uuid, spec: JobSpec) -> Self {
        Self::build(id, Some(spec))
    }

    /// A handle for a job submitted elsewhere. The spec is not recoverable.
    pub fn attached(id: Option<Uuid>, native_id: &str) -> Self {
        let job = Self::build(id.unwrap_or_else(Uuid::new_v4), None);
        job.inner.submitted.store(true, Ordering::SeqCst);
        job.set_native_id(native_id)
            .expect("fresh handle has no native id");
        job
    }

    fn build(id: Uuid, spec: Option<JobSpec>) -> Self {
        let initial = JobStatus::new(JobState::New);
        Job {
            inner: Arc::new(Inner {
                id,
                spec,
                native_id: OnceLock::new(),
                executor: OnceLock::new(),
                submitted: AtomicBool::new(false),
                record: Mutex::new(Record {
                    current: initial.clone(),
                    history: vec![initial],
                }),
                changed: Condvar::new(),
                dispatch: Mutex::new(()),
                listeners: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn id(&self) -> Uuid {
        self.inner.id
    }

    pub fn spec(&self) -> Option<&JobSpec> {
        self.inner.spec.as_ref()
    }

    pub fn native_id(&self) -> Option<&str> {
        self.inner.native_id.get().map(String::as_str)
    }

    /// Name of the executor managing this job, once submitted or attached.
    pub fn executor(&self) -> Option<&str> {
        self.inner.executor.get().map(String::as_str)
    }

    pub fn status(&self) -> JobStatus {
        lock(&self.inner.record).current.clone()
    }

    pub fn state(&self) -> JobState {
        lock(&self.inner.record).current.state
    }

    pub fn history(&self) -> Vec<JobStatus> {
        lock(&self.inner.record).history.clone()
    }

    pub fn same_job(&self, other: &Job) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Sets the scheduler id. Fails if a different id is already set.
    pub fn set_native_id(&self, native_id: &str) -> Result<()> {
        let stored = self.inner.native_id.get_or_init(|| native_id.to_string());
        if stored == native_id {
            Ok(())
        } else {
            Err(Error::InvalidJobState {
                operation: "set native id of",
                state: self.state(),
                reason: format!("native id already set to {stored}"),
            })
        }
    }

    pub fn add_callback(&self, callback: Arc<dyn StatusCallback>) {
        lock(&self.inner.listeners).push(callback);
    }

    /// Marks the job as handed to an executor. Only the first caller wins.
    pub(crate) fn claim(&self, executor: &str, operation: &'static str) -> Result<()> {
        let state = self.state();
        if state != JobState::New
            || self
                .inner
                .submitted
                .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
                .is_err()
        {
            return Err(Error::InvalidJobState {
                operation,
                state,
                reason: "job has already been submitted".into(),
            });
        }
        let _ = self.inner.executor.set(executor.to_string());
        Ok(())
    }

    pub(crate) fn bind_executor(&self, executor: &str) {
        let _ = self.inner.executor.set(executor.to_string());
    }

    pub(crate) fn is_claimed(&self) -> bool {
        self.inner.submitted.load(Ordering::SeqCst)
    }

    /// Applies a status report.
    ///
    /// A report repeating the current state is dropped and returns
    /// `Ok(false)`. A genuine transition is appended to the history, wakes
    /// waiters, runs callbacks and returns `Ok(true)`. Reports that would
    /// leave the transition graph fail with [`Error::IllegalTransition`] and
    /// leave the job unchanged.
    pub fn record_status(&self, status: JobStatus) -> Result<bool> {
        let _dispatch = lock(&self.inner.dispatch);
        {
            let mut record = lock(&self.inner.record);
            let from = record.current.state;
            if status.state == from {
                return Ok(false);
            }
            if !from.can_transition_to(status.state) {
                return Err(Error::IllegalTransition {
                    from,
                    to: status.state,
                });
            }
            status.check().map_err(Error::InvalidStatus)?;
            record.history.push(status.clone());
            record.current = status.clone();
        }
        self.inner.changed.notify_all();

        let listeners = lock(&self.inner.listeners).clone();
        for listener in listeners {
            listener.job_status_changed(self, &status);
        }
        Ok(true)
    }

    /// Walks from the current state to `status.state`, recording inferred
    /// intermediate states (carrying `status`'s metadata) on the way.
    ///
    /// Returns the number of transitions recorded; a target that is not
    /// reachable from the current state is an [`Error::IllegalTransition`].
    pub fn advance_to(&self, status: JobStatus) -> Result<usize> {
        let from = self.state();
        let path = from.path_to(status.state).ok_or(Error::IllegalTransition {
            from,
            to: status.state,
        })?;
        let mut recorded = 0;
        if let Some((_, intermediate)) = path.split_last() {
            for &state in intermediate {
                let mut step = JobStatus::new(state);
                step.metadata = status.metadata.clone();
                step.metadata.insert("inferred".into(), "true".into());
                recorded += usize::from(self.record_status(step)?);
            }
        }
        recorded += usize::from(self.record_status(status)?);
        Ok(recorded)
    }

    /// Blocks until the job is terminal or `timeout` elapses.
    ///
    /// Relies only on recorded transitions, never on scheduler queries. On
    /// timeout the job keeps being monitored and a later wait may succeed.
    pub fn wait(&self, timeout: Option<Duration>) -> Result<JobStatus> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut record = lock(&self.inner.record);
        loop {
            if record.current.state.is_terminal() {
                return Ok(record.current.clone());
            }
            record = match deadline {
                None => self
                    .inner
                    .changed
                    .wait(record)
                    .unwrap_or_else(|p| p.into_inner()),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(Error::Timeout);
                    }
                    self.inner
                        .changed
                        .wait_timeout(record, deadline - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    /// Blocks until the job leaves `NEW` (windowed submissions assign their
    /// native id asynchronously).
    pub fn wait_submitted(&self, timeout: Option<Duration>) -> Result<JobStatus> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut record = lock(&self.inner.record);
        while record.current.state == JobState::New {
            record = match deadline {
                None => self
                    .inner
                    .changed
                    .wait(record)
                    .unwrap_or_else(|p| p.into_inner()),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(Error::Timeout);
                    }
                    self.inner
                        .changed
                        .wait_timeout(record, deadline - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
        Ok(record.current.clone())
    }
}

impl fmt::Debug for Job {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Job")
            .field("id", &self.inner.id)
            .field("native_id", &self.native_id())
            .field("state", &self.state())
            .finish()
    }
}

/// Free-function form of [`Job::wait`].
pub fn wait(job: &Job, timeout: Option<Duration>) -> Result<JobStatus> {
    job.wait(timeout)
}

/// Free-function form of [`Job::record_status`].
pub fn record_status(job: &Job, status: JobStatus) -> Result<bool> {
    job.record_status(status)
}
