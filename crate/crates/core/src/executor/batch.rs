use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use uuid::Uuid;

use super::{CallbackList, Executor, ExecutorConfig};
use crate::error::{Error, Result};
use crate::job::{Job, JobSpec, JobState, JobStatus, StatusCallback, Violation};
use crate::launcher::Launchers;
use crate::lrm::exit_code::{self, JobRecord};
use crate::lrm::{self, CommandRunner, NativeStatus, SchedulerProfile, ScriptContext};

/// A window flushes early once this many submissions are pending.
pub const MAX_WINDOW_BATCH: usize = 100;
/// Consecutive polls a job may be missing from scheduler output, with no
/// exit-code file, before it is declared lost.
pub const ABSENT_GRACE_CYCLES: u32 = 2;
/// Consecutive unrecognized state tokens tolerated before a job fails.
pub const UNKNOWN_TOKEN_LIMIT: u32 = 5;

/// Counters for one executor instance.
#[derive(Debug, Default)]
pub struct ExecutorStats {
    pub poll_cycles: AtomicU64,
    pub status_queries: AtomicU64,
    pub submit_invocations: AtomicU64,
    pub unknown_tokens: AtomicU64,
}

/// Executor for a batch scheduler reached through its public commands.
pub struct BatchExecutor {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

struct Shared {
    name: String,
    profile: SchedulerProfile,
    runner: CommandRunner,
    config: ExecutorConfig,
    launchers: Launchers,
    callbacks: Arc<CallbackList>,
    state: Mutex<State>,
    wake: Condvar,
    // Serializes poll cycles between the worker and explicit callers.
    poll_lock: Mutex<()>,
    stats: ExecutorStats,
}

#[derive(Default)]
struct State {
    tracked: HashMap<Uuid, Tracked>,
    pending: Vec<Pending>,
    window_opened: Option<Instant>,
    consecutive_failures: u32,
    next_seq: u64,
    shutdown: bool,
}

struct Tracked {
    seq: u64,
    job: Job,
    native_id: String,
    absent_cycles: u32,
    unknown_streak: u32,
    cancel_requested: bool,
}

struct Pending {
    job: Job,
    script: PathBuf,
    cancel_requested: bool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl BatchExecutor {
    pub fn new(
        name: &str,
        profile: SchedulerProfile,
        config: ExecutorConfig,
        launchers: Launchers,
    ) -> Result<Self> {
        config.validate()?;
        profile.check()?;
        fs::create_dir_all(&config.work_directory)
            .map_err(|e| Error::io(&config.work_directory, e))?;
        let profile = match config.bulk_submit {
            Some(b) => profile.with_bulk_submit(b),
            None => profile,
        };
        let shared = Arc::new(Shared {
            name: name.to_string(),
            runner: CommandRunner::new(config.command_prefix.clone(), config.command_timeout),
            profile,
            config,
            launchers,
            callbacks: Arc::default(),
            state: Mutex::default(),
            wake: Condvar::new(),
            poll_lock: Mutex::new(()),
            stats: ExecutorStats::default(),
        });
        let worker_shared = shared.clone();
        let worker = thread::Builder::new()
            .name(format!("psij-{name}"))
            .spawn(move || worker_shared.run_worker())
            .map_err(|e| Error::InvalidConfig(format!("cannot start poller thread: {e}")))?;
        Ok(BatchExecutor {
            shared,
            worker: Some(worker),
        })
    }

    pub fn profile(&self) -> &SchedulerProfile {
        &self.shared.profile
    }

    pub fn stats(&self) -> &ExecutorStats {
        &self.shared.stats
    }

    /// Jobs currently monitored (submitted, not yet terminal).
    pub fn tracked_jobs(&self) -> usize {
        lock(&self.shared.state).tracked.len()
    }

    /// Renders the submit script `job` would get, without submitting.
    pub fn render_script(&self, job: &Job) -> Result<String> {
        let spec = job.spec().ok_or_else(|| Error::InvalidJobState {
            operation: "render",
            state: job.state(),
            reason: "attached jobs carry no spec".into(),
        })?;
        self.shared.render(job.id(), spec)
    }
}

impl Drop for BatchExecutor {
    fn drop(&mut self) {
        lock(&self.shared.state).shutdown = true;
        self.shared.wake.notify_all();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

impl Shared {
    fn render(&self, job_id: Uuid, spec: &JobSpec) -> Result<String> {
        let launcher = self.launchers.for_spec(spec)?;
        lrm::render_submit_script(
            spec,
            &self.profile,
            launcher,
            &ScriptContext {
                job_id,
                work_directory: &self.config.work_directory,
            },
        )
    }

    fn run_worker(self: Arc<Self>) {
        let interval = self.config.poll_interval;
        let mut next_poll = Instant::now() + interval;
        loop {
            let mut st = lock(&self.state);
            let now = Instant::now();
            let flush_at = st.window_opened.map(|opened| {
                if st.pending.len() >= MAX_WINDOW_BATCH || st.shutdown {
                    now
                } else {
                    opened + self.config.submit_window.unwrap_or_default()
                }
            });
            let due_flush = flush_at.is_some_and(|t| t <= now);
            if st.shutdown && !due_flush {
                return;
            }
            let due_poll = next_poll <= now;
            if !due_flush && !due_poll {
                let deadline = flush_at.map_or(next_poll, |f| f.min(next_poll));
                drop(
                    self.wake
                        .wait_timeout(st, deadline - now)
                        .unwrap_or_else(|p| p.into_inner()),
                );
                continue;
            }
            let batch = if due_flush {
                st.window_opened = None;
                std::mem::take(&mut st.pending)
            } else {
                Vec::new()
            };
            drop(st);

            if !batch.is_empty() {
                self.submit_batch(batch);
            }
            if due_poll {
                if let Err(e) = self.poll_cycle() {
                    log::warn!("{}: poll cycle failed: {e}", self.name);
                }
                next_poll = (next_poll + interval).max(Instant::now());
            }
        }
    }

    /// Runs the scheduler submit for `batch`, in one invocation when the
    /// profile supports it. Returns one result per item, in order.
    fn submit_batch(&self, batch: Vec<Pending>) -> Vec<Result<()>> {
        let groups: Vec<Vec<Pending>> = if self.profile.bulk_submit {
            let mut groups = Vec::new();
            let mut iter = batch.into_iter().peekable();
            while iter.peek().is_some() {
                groups.push(iter.by_ref().take(MAX_WINDOW_BATCH).collect());
            }
            groups
        } else {
            batch.into_iter().map(|p| vec![p]).collect()
        };

        let mut results = Vec::new();
        for group in groups {
            let scripts: Vec<PathBuf> = group.iter().map(|p| p.script.clone()).collect();
            self.stats.submit_invocations.fetch_add(1, Ordering::Relaxed);
            match lrm::submit(&self.profile, &self.runner, &scripts) {
                Ok(ids) => {
                    let returned = ids.len();
                    let mut ids = ids.into_iter();
                    for p in group {
                        results.push(match ids.next() {
                            Some(id) => self.accept(p, id),
                            None => {
                                let err = Error::SubmitFailed {
                                    message: format!(
                                        "scheduler returned {returned} job ids for {} scripts",
                                        scripts.len()
                                    ),
                                    stderr: String::new(),
                                };
                                self.reject(&p.job, &err);
                                Err(err)
                            }
                        });
                    }
                }
                Err(e) => {
                    for p in &group {
                        self.reject(&p.job, &e);
                    }
                    results.extend(group.iter().map(|_| Err(clone_submit_error(&e))));
                }
            }
        }
        results
    }

    fn accept(&self, p: Pending, native_id: String) -> Result<()> {
        p.job.set_native_id(&native_id)?;
        let record = JobRecord {
            id: p.job.id(),
            native_id: native_id.clone(),
            executor: self.name.clone(),
        };
        if let Err(e) = exit_code::write_job_record(&self.config.work_directory, &record) {
            log::warn!("{}: cannot record job {}: {e}", self.name, p.job.id());
        }
        p.job.record_status(
            JobStatus::new(JobState::Queued).with_metadata("native_id", native_id.clone()),
        )?;
        {
            let mut st = lock(&self.state);
            let seq = st.next_seq;
            st.next_seq += 1;
            st.tracked.insert(
                p.job.id(),
                Tracked {
                    seq,
                    job: p.job.clone(),
                    native_id: native_id.clone(),
                    absent_cycles: 0,
                    unknown_streak: 0,
                    cancel_requested: p.cancel_requested,
                },
            );
        }
        if p.cancel_requested {
            self.send_cancel(&native_id)?;
        }
        Ok(())
    }

    fn reject(&self, job: &Job, err: &Error) {
        let status = JobStatus::new(JobState::Failed).with_message(err.to_string());
        if let Err(e) = job.advance_to(status) {
            log::warn!("{}: cannot mark job {} failed: {e}", self.name, job.id());
        }
    }

    fn send_cancel(&self, native_id: &str) -> Result<()> {
        match lrm::request_cancel(&self.profile, &self.runner, native_id) {
            Ok(()) => Ok(()),
            Err(Error::CancelRejected(msg)) => {
                log::info!("{}: cancel of {native_id} rejected ({msg}); job already ended", self.name);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn poll_cycle(&self) -> Result<usize> {
        let _cycle = lock(&self.poll_lock);
        let snapshot: Vec<(Uuid, String)> = {
            let st = lock(&self.state);
            let mut v: Vec<_> = st
                .tracked
                .values()
                .map(|t| (t.seq, t.job.id(), t.native_id.clone()))
                .collect();
            v.sort_unstable_by_key(|(seq, _, _)| *seq);
            v.into_iter().map(|(_, id, nid)| (id, nid)).collect()
        };
        if snapshot.is_empty() {
            return Ok(0);
        }
        self.stats.poll_cycles.fetch_add(1, Ordering::Relaxed);
        self.stats.status_queries.fetch_add(1, Ordering::Relaxed);
        let ids: Vec<&str> = snapshot.iter().map(|(_, nid)| nid.as_str()).collect();

        let observed = match lrm::bulk_status(&self.profile, &self.runner, &ids) {
            Ok(map) => map,
            Err(e) => {
                self.status_query_failed(&e);
                return Err(e);
            }
        };

        let mut updates = Vec::new();
        {
            let mut st = lock(&self.state);
            st.consecutive_failures = 0;
            for (job_id, native_id) in &snapshot {
                let Some(t) = st.tracked.get_mut(job_id) else {
                    continue;
                };
                let obs = observed.get(native_id).unwrap_or(&NativeStatus::Absent);
                if let Some(status) = self.resolve(t, obs) {
                    if status.state.is_terminal() {
                        let t = st.tracked.remove(job_id).expect("present");
                        updates.push((t.job, status));
                    } else {
                        updates.push((t.job.clone(), status));
                    }
                }
            }
        }
        Ok(self.apply(updates))
    }

    fn apply(&self, updates: Vec<(Job, JobStatus)>) -> usize {
        let mut recorded = 0;
        for (job, status) in updates {
            match job.advance_to(status) {
                Ok(n) => recorded += n,
                Err(e) => log::warn!("{}: ignoring report for {}: {e}", self.name, job.id()),
            }
        }
        recorded
    }

    fn status_query_failed(&self, err: &Error) {
        let lost: Vec<Job> = {
            let mut st = lock(&self.state);
            st.consecutive_failures += 1;
            if st.consecutive_failures < self.config.failure_limit {
                return;
            }
            st.consecutive_failures = 0;
            st.tracked.drain().map(|(_, t)| t.job).collect()
        };
        let message = format!(
            "scheduler status query failed {} consecutive times; last error: {err}",
            self.config.failure_limit
        );
        log::error!("{}: {message}", self.name);
        let updates = lost
            .into_iter()
            .map(|job| (job, JobStatus::new(JobState::Failed).with_message(message.clone())))
            .collect();
        self.apply(updates);
    }

    /// Decides what, if anything, to record for one observation.
    fn resolve(&self, t: &mut Tracked, obs: &NativeStatus) -> Option<JobStatus> {
        match obs {
            NativeStatus::Known {
                state,
                token,
                exit_code,
            } => {
                t.absent_cycles = 0;
                t.unknown_streak = 0;
                if state.is_terminal() {
                    Some(self.finalize(t, Some(*state), *exit_code).with_metadata("native_state", token))
                } else {
                    Some(JobStatus::new(*state).with_metadata("native_state", token))
                }
            }
            NativeStatus::Unknown { token } => {
                t.unknown_streak += 1;
                self.stats.unknown_tokens.fetch_add(1, Ordering::Relaxed);
                log::warn!(
                    "{}: job {} reported unrecognized state {token:?} ({} in a row)",
                    self.name,
                    t.native_id,
                    t.unknown_streak
                );
                (t.unknown_streak >= UNKNOWN_TOKEN_LIMIT).then(|| {
                    JobStatus::new(JobState::Failed)
                        .with_message(format!(
                            "scheduler reported unrecognized state {token:?} {UNKNOWN_TOKEN_LIMIT} times in a row"
                        ))
                        .with_metadata("native_state", token)
                })
            }
            NativeStatus::Absent => {
                if exit_code::read_exit_code(&self.config.work_directory, t.job.id()).is_some() {
                    return Some(self.finalize(t, None, None));
                }
                t.absent_cycles += 1;
                (t.absent_cycles > ABSENT_GRACE_CYCLES).then(|| {
                    if t.cancel_requested {
                        JobStatus::new(JobState::Canceled)
                    } else {
                        JobStatus::new(JobState::Failed).with_message("job disappeared")
                    }
                })
            }
        }
    }

    /// Terminal status for a job the scheduler reports finished or no
    /// longer lists. The exit-code file wins when present: it is only
    /// written when the payload ran to completion.
    fn finalize(&self, t: &Tracked, native: Option<JobState>, native_exit: Option<i32>) -> JobStatus {
        if let Some(code) = exit_code::read_exit_code(&self.config.work_directory, t.job.id()) {
            return JobStatus::exited(code);
        }
        if t.cancel_requested {
            return JobStatus::new(JobState::Canceled);
        }
        match native {
            Some(JobState::Canceled) => JobStatus::new(JobState::Canceled),
            Some(JobState::Completed) => match native_exit {
                Some(code) => JobStatus::exited(code),
                None => JobStatus::new(JobState::Completed),
            },
            Some(JobState::Failed) => {
                let status = JobStatus::new(JobState::Failed)
                    .with_message("scheduler reported failure and no exit-code file was written");
                match native_exit {
                    Some(code) => status.with_exit_code(code),
                    None => status,
                }
            }
            _ => JobStatus::new(JobState::Failed).with_message("job disappeared"),
        }
    }

    fn attach_many(&self, native_ids: &[&str]) -> Vec<Result<Job>> {
        let mut results: Vec<Option<Result<Job>>> = Vec::with_capacity(native_ids.len());
        let mut to_query = Vec::new();
        {
            let st = lock(&self.state);
            for (i, nid) in native_ids.iter().enumerate() {
                match st.tracked.values().find(|t| t.native_id == *nid) {
                    Some(t) => results.push(Some(Ok(t.job.clone()))),
                    None => {
                        results.push(None);
                        to_query.push(i);
                    }
                }
            }
        }
        if to_query.is_empty() {
            return results.into_iter().map(Option::unwrap).collect();
        }

        let ids: Vec<&str> = to_query.iter().map(|&i| native_ids[i]).collect();
        self.stats.status_queries.fetch_add(1, Ordering::Relaxed);
        let observed = match lrm::bulk_status(&self.profile, &self.runner, &ids) {
            Ok(map) => map,
            Err(e) => {
                for &i in &to_query {
                    results[i] = Some(Err(Error::SchedulerUnavailable(e.to_string())));
                }
                return results.into_iter().map(Option::unwrap).collect();
            }
        };

        let mut updates = Vec::new();
        for &i in &to_query {
            let nid = native_ids[i];
            let client_id = exit_code::lookup_native(&self.config.work_directory, nid);
            let obs = observed.get(nid).unwrap_or(&NativeStatus::Absent);
            if matches!(obs, NativeStatus::Absent) && client_id.is_none() {
                results[i] = Some(Err(Error::UnknownNativeId(nid.to_string())));
                continue;
            }
            let job = Job::attached(client_id, nid);
            job.bind_executor(&self.name);
            job.add_callback(self.callbacks.clone());

            let mut t = Tracked {
                seq: 0,
                job: job.clone(),
                native_id: nid.to_string(),
                absent_cycles: 0,
                unknown_streak: 0,
                cancel_requested: false,
            };
            let status = match obs {
                // Nothing known yet beyond the job existing in our records.
                NativeStatus::Unknown { .. } => {
                    let _ = self.resolve(&mut t, obs);
                    JobStatus::new(JobState::Queued)
                }
                NativeStatus::Absent if client_id.is_some_and(|id| {
                    exit_code::read_exit_code(&self.config.work_directory, id).is_none()
                }) =>
                {
                    t.absent_cycles = 1;
                    JobStatus::new(JobState::Queued)
                }
                _ => self
                    .resolve(&mut t, obs)
                    .unwrap_or_else(|| JobStatus::new(JobState::Queued)),
            }
            .with_metadata("attached", "true");

            if !status.state.is_terminal() {
                let mut st = lock(&self.state);
                t.seq = st.next_seq;
                st.next_seq += 1;
                st.tracked.insert(job.id(), t);
            }
            updates.push((job.clone(), status));
            results[i] = Some(Ok(job));
        }
        self.apply(updates);
        results.into_iter().map(Option::unwrap).collect()
    }
}

fn clone_submit_error(e: &Error) -> Error {
    match e {
        Error::SubmitFailed { message, stderr } => Error::SubmitFailed {
            message: message.clone(),
            stderr: stderr.clone(),
        },
        Error::UnparseableSubmitOutput(out) => Error::UnparseableSubmitOutput(out.clone()),
        other => Error::SubmitFailed {
            message: other.to_string(),
            stderr: String::new(),
        },
    }
}

impl Executor for BatchExecutor {
    fn name(&self) -> &str {
        &self.shared.name
    }

    fn config(&self) -> &ExecutorConfig {
        &self.shared.config
    }

    fn validate(&self, spec: &JobSpec) -> Vec<Violation> {
        let mut v = crate::job::validate_spec(spec);
        if let Err(e) = self.shared.launchers.for_spec(spec) {
            v.push(Violation::new("launcher", e.to_string()));
        }
        v
    }

    fn submit(&self, job: &Job) -> Result<()> {
        let shared = &self.shared;
        if job.is_claimed() || job.state() != JobState::New {
            return Err(Error::InvalidJobState {
                operation: "submit",
                state: job.state(),
                reason: "job has already been submitted".into(),
            });
        }
        let spec = job.spec().ok_or_else(|| Error::InvalidJobState {
            operation: "submit",
            state: job.state(),
            reason: "attached jobs cannot be resubmitted".into(),
        })?;
        let violations = self.validate(spec);
        if !violations.is_empty() {
            return Err(Error::InvalidSpec(violations));
        }
        let script = shared.render(job.id(), spec)?;
        job.claim(&shared.name, "submit")?;
        job.add_callback(shared.callbacks.clone());

        let path = exit_code::script_path(&shared.config.work_directory, job.id());
        if let Err(e) = fs::write(&path, script) {
            let err = Error::io(&path, e);
            shared.reject(job, &err);
            return Err(err);
        }
        let pending = Pending {
            job: job.clone(),
            script: path,
            cancel_requested: false,
        };

        if shared.config.submit_window.is_some() {
            let mut st = lock(&shared.state);
            if !st.shutdown {
                st.pending.push(pending);
                if st.window_opened.is_none() {
                    st.window_opened = Some(Instant::now());
                }
                drop(st);
                shared.wake.notify_all();
                return Ok(());
            }
        }
        shared
            .submit_batch(vec![pending])
            .pop()
            .expect("one result per submission")
    }

    fn cancel(&self, job: &Job) -> Result<()> {
        let shared = &self.shared;
        let state = job.state();
        let invalid = |reason: &str| Error::InvalidJobState {
            operation: "cancel",
            state,
            reason: reason.to_string(),
        };
        if state.is_terminal() {
            return Err(invalid("job is already terminal"));
        }
        let native_id = {
            let mut st = lock(&shared.state);
            if let Some(p) = st.pending.iter_mut().find(|p| p.job.same_job(job)) {
                // Takes effect right after the window's submit call.
                p.cancel_requested = true;
                return Ok(());
            }
            match st.tracked.get_mut(&job.id()) {
                Some(t) if t.job.same_job(job) => {
                    t.cancel_requested = true;
                    t.native_id.clone()
                }
                _ if state == JobState::New => return Err(invalid("job has not been submitted")),
                _ => return Err(invalid("job is not managed by this executor")),
            }
        };
        shared.send_cancel(&native_id)
    }

    fn attach_many(&self, native_ids: &[&str]) -> Vec<Result<Job>> {
        self.shared.attach_many(native_ids)
    }

    fn poll_cycle(&self) -> Result<usize> {
        self.shared.poll_cycle()
    }

    fn add_callback(&self, callback: Arc<dyn StatusCallback>) {
        self.shared.callbacks.push(callback);
    }
}
