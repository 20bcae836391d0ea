//! Runs jobs as child processes of the current process.
//!
//! Every job gets its own process group, so cancellation reaches anything the
//! payload spawned. Scheduler attributes (queue, account, wall time) are
//! ignored; resource requests beyond one node are rejected.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use uuid::Uuid;

use crate::error::{Error, Result};
use crate::executor::{CallbackList, Executor, ExecutorConfig};
use crate::job::{EnvironmentPolicy, Job, JobSpec, JobState, JobStatus, StatusCallback, Violation};
use crate::launcher::{render_launch_line, Launchers};

/// Time between SIGTERM and SIGKILL when cancelling.
pub const CANCEL_GRACE: Duration = Duration::from_secs(5);
const WATCH_INTERVAL: Duration = Duration::from_millis(5);

pub struct LocalExecutor {
    shared: Arc<Shared>,
    watcher: Option<JoinHandle<()>>,
}

struct Shared {
    name: String,
    config: ExecutorConfig,
    launchers: Launchers,
    callbacks: Arc<CallbackList>,
    state: Mutex<State>,
    wake: Condvar,
}

#[derive(Default)]
struct State {
    procs: HashMap<Uuid, Proc>,
    shutdown: bool,
}

struct Proc {
    job: Job,
    pgid: i32,
    children: Vec<Copy>,
    cancel_at: Option<Instant>,
    killed: bool,
}

struct Copy {
    child: Child,
    outcome: Option<Outcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Exited(i32),
    Signaled(i32),
}

impl Outcome {
    /// Shell convention: death by signal `n` reads as `128 + n`.
    fn code(self) -> i32 {
        match self {
            Outcome::Exited(c) => c,
            Outcome::Signaled(s) => 128 + s,
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Checks whether `pid` has terminated without reaping it, so its pid (and
/// the process group it leads) cannot be reused while we still signal it.
fn peek_exit(pid: u32) -> Option<Outcome> {
    // SAFETY: zeroed siginfo_t is a valid out-parameter for waitid.
    let mut info: libc::siginfo_t = unsafe { std::mem::zeroed() };
    // SAFETY: `pid` is our own unreaped child; `info` outlives the call.
    let rc = unsafe {
        libc::waitid(
            libc::P_PID,
            pid as libc::id_t,
            &mut info,
            libc::WEXITED | libc::WNOHANG | libc::WNOWAIT,
        )
    };
    // SAFETY: si_pid/si_status are valid for SIGCHLD-shaped siginfo.
    let (si_pid, status) = unsafe { (info.si_pid(), info.si_status()) };
    if rc != 0 || si_pid == 0 {
        return None;
    }
    Some(match info.si_code {
        libc::CLD_EXITED => Outcome::Exited(status),
        _ => Outcome::Signaled(status),
    })
}

fn signal_group(pgid: i32, sig: i32) {
    // SAFETY: plain syscall; a vanished group yields ESRCH, which is fine.
    unsafe {
        libc::killpg(pgid, sig);
    }
}

fn open_out(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

impl LocalExecutor {
    pub fn new(name: &str, config: ExecutorConfig, launchers: Launchers) -> Result<Self> {
        config.validate()?;
        let shared = Arc::new(Shared {
            name: name.to_string(),
            config,
            launchers,
            callbacks: Arc::default(),
            state: Mutex::default(),
            wake: Condvar::new(),
        });
        let watcher_shared = shared.clone();
        let watcher = thread::Builder::new()
            .name(format!("psij-{name}"))
            .spawn(move || watcher_shared.watch())
            .map_err(|e| Error::InvalidConfig(format!("cannot start watcher thread: {e}")))?;
        Ok(LocalExecutor {
            shared,
            watcher: Some(watcher),
        })
    }

    /// Jobs with at least one live process.
    pub fn running_jobs(&self) -> usize {
        lock(&self.shared.state).procs.len()
    }

    fn spawn(&self, spec: &JobSpec) -> Result<Vec<Child>> {
        let launcher = self.shared.launchers.for_spec(spec)?;
        let line = render_launch_line(launcher, spec)?;
        let (program, args) = line
            .tokens
            .split_first()
            .ok_or_else(|| Error::SpawnFailed("empty launch line".into()))?;

        let mut children: Vec<Child> = Vec::new();
        let mut pgid = 0;
        for _ in 0..line.copies {
            let mut cmd = Command::new(program);
            cmd.args(args);
            if let Some(dir) = &spec.directory {
                cmd.current_dir(dir);
            }
            if spec.environment_policy == Some(EnvironmentPolicy::InheritNone) {
                cmd.env_clear();
            }
            cmd.envs(&spec.environment_overrides);
            cmd.stdin(match &spec.stdin_path {
                Some(p) => Stdio::from(File::open(p).map_err(|e| Error::io(p, e))?),
                None => Stdio::null(),
            });
            let stdout = spec.stdout_path.as_deref().map(open_out).transpose()?;
            let stderr = if spec.merges_output() {
                stdout
                    .as_ref()
                    .map(|f| f.try_clone().map_err(|e| Error::io(spec.stdout_path.as_ref().unwrap(), e)))
                    .transpose()?
            } else {
                spec.stderr_path.as_deref().map(open_out).transpose()?
            };
            cmd.stdout(stdout.map_or_else(Stdio::null, Stdio::from));
            cmd.stderr(stderr.map_or_else(Stdio::null, Stdio::from));
            cmd.process_group(pgid);

            match cmd.spawn() {
                Ok(child) => {
                    if pgid == 0 {
                        pgid = child.id() as i32;
                    }
                    children.push(child);
                }
                Err(e) => {
                    if pgid != 0 {
                        signal_group(pgid, libc::SIGKILL);
                    }
                    for mut c in children {
                        let _ = c.wait();
                    }
                    return Err(Error::SpawnFailed(format!("{program}: {e}")));
                }
            }
        }
        Ok(children)
    }
}

impl Drop for LocalExecutor {
    fn drop(&mut self) {
        lock(&self.shared.state).shutdown = true;
        self.shared.wake.notify_all();
        if let Some(w) = self.watcher.take() {
            let _ = w.join();
        }
    }
}

impl Shared {
    fn watch(&self) {
        loop {
            let finished = {
                let mut st = lock(&self.state);
                if st.shutdown && st.procs.is_empty() {
                    return;
                }
                if st.procs.is_empty() {
                    st = self
                        .wake
                        .wait_timeout(st, Duration::from_millis(200))
                        .unwrap_or_else(|p| p.into_inner())
                        .0;
                    if st.procs.is_empty() {
                        continue;
                    }
                }
                if st.shutdown {
                    // Dropping the executor cancels whatever is left.
                    for p in st.procs.values_mut() {
                        if p.cancel_at.is_none() {
                            p.cancel_at = Some(Instant::now() - CANCEL_GRACE);
                        }
                    }
                }
                self.scan(&mut st)
            };
            for (job, status) in finished {
                if let Err(e) = job.advance_to(status) {
                    log::warn!("{}: ignoring exit of {}: {e}", self.name, job.id());
                }
            }
            thread::sleep(WATCH_INTERVAL);
        }
    }

    fn scan(&self, st: &mut State) -> Vec<(Job, JobStatus)> {
        let now = Instant::now();
        let mut done = Vec::new();
        for (id, p) in st.procs.iter_mut() {
            for c in p.children.iter_mut().filter(|c| c.outcome.is_none()) {
                c.outcome = peek_exit(c.child.id());
            }
            let all_exited = p.children.iter().all(|c| c.outcome.is_some());
            if !all_exited {
                if let Some(at) = p.cancel_at {
                    if !p.killed && now >= at + CANCEL_GRACE {
                        signal_group(p.pgid, libc::SIGKILL);
                        p.killed = true;
                    }
                }
                continue;
            }
            // The leader is still an unreaped zombie, so the group id is
            // ours: sweep up anything the payload left behind.
            signal_group(p.pgid, libc::SIGKILL);
            done.push(*id);
        }

        done.into_iter()
            .map(|id| {
                let mut p = st.procs.remove(&id).expect("present");
                for c in &mut p.children {
                    let _ = c.child.wait();
                }
                let worst = p
                    .children
                    .iter()
                    .filter_map(|c| c.outcome)
                    .max_by_key(|o| o.code())
                    .expect("at least one copy");
                let status = if p.cancel_at.is_some() {
                    JobStatus::new(JobState::Canceled)
                        .with_metadata("exit_code", worst.code().to_string())
                } else {
                    match worst {
                        Outcome::Exited(code) => JobStatus::exited(code),
                        Outcome::Signaled(sig) => JobStatus::new(JobState::Failed)
                            .with_exit_code(128 + sig)
                            .with_message(format!("killed by signal {sig}")),
                    }
                };
                (p.job, status)
            })
            .collect()
    }
}

impl Executor for LocalExecutor {
    fn name(&self) -> &str {
        &self.shared.name
    }

    fn config(&self) -> &ExecutorConfig {
        &self.shared.config
    }

    fn validate(&self, spec: &JobSpec) -> Vec<Violation> {
        let mut v = crate::job::validate_spec(spec);
        if spec.resources.node_count.is_some_and(|n| n > 1) {
            v.push(Violation::new(
                "resources.node_count",
                "the local executor runs on one node",
            ));
        }
        match self.shared.launchers.for_spec(spec) {
            Ok(l) => {
                if let Err(e) = render_launch_line(l, spec) {
                    v.push(Violation::new("launcher", e.to_string()));
                }
            }
            Err(e) => v.push(Violation::new("launcher", e.to_string())),
        }
        v
    }

    fn submit(&self, job: &Job) -> Result<()> {
        let shared = &self.shared;
        let spec = job.spec().ok_or_else(|| Error::InvalidJobState {
            operation: "submit",
            state: job.state(),
            reason: "attached jobs cannot be resubmitted".into(),
        })?;
        if job.is_claimed() || job.state() != JobState::New {
            return Err(Error::InvalidJobState {
                operation: "submit",
                state: job.state(),
                reason: "job has already been submitted".into(),
            });
        }
        let violations = self.validate(spec);
        if !violations.is_empty() {
            return Err(Error::InvalidSpec(violations));
        }
        job.claim(&shared.name, "submit")?;
        job.add_callback(shared.callbacks.clone());

        let children = match self.spawn(spec) {
            Ok(c) => c,
            Err(e) => {
                let _ = job.advance_to(JobStatus::new(JobState::Failed).with_message(e.to_string()));
                return Err(e);
            }
        };
        let pgid = children[0].id() as i32;
        job.set_native_id(&pgid.to_string())?;

        // Recorded before the watcher can see the process, so QUEUED and
        // ACTIVE always precede the terminal state.
        let mut st = lock(&shared.state);
        job.record_status(JobStatus::new(JobState::Queued).with_metadata("native_id", pgid.to_string()))?;
        job.record_status(JobStatus::new(JobState::Active))?;
        st.procs.insert(
            job.id(),
            Proc {
                job: job.clone(),
                pgid,
                children: children
                    .into_iter()
                    .map(|child| Copy { child, outcome: None })
                    .collect(),
                cancel_at: None,
                killed: false,
            },
        );
        drop(st);
        shared.wake.notify_all();
        Ok(())
    }

    fn cancel(&self, job: &Job) -> Result<()> {
        let state = job.state();
        let mut st = lock(&self.shared.state);
        match st.procs.get_mut(&job.id()) {
            Some(p) if p.job.same_job(job) => {
                if p.cancel_at.is_none() {
                    p.cancel_at = Some(Instant::now());
                    signal_group(p.pgid, libc::SIGTERM);
                }
                Ok(())
            }
            _ => Err(Error::InvalidJobState {
                operation: "cancel",
                state,
                reason: if state.is_terminal() {
                    "job is already terminal".into()
                } else if state == JobState::New {
                    "job has not been submitted".into()
                } else {
                    "job is not managed by this executor".into()
                },
            }),
        }
    }

    /// Only processes started by this instance can be attached to.
    fn attach_many(&self, native_ids: &[&str]) -> Vec<Result<Job>> {
        let st = lock(&self.shared.state);
        native_ids
            .iter()
            .map(|nid| {
                st.procs
                    .values()
                    .find(|p| p.pgid.to_string() == *nid)
                    .map(|p| p.job.clone())
                    .ok_or_else(|| Error::UnknownNativeId(nid.to_string()))
            })
            .collect()
    }

    fn poll_cycle(&self) -> Result<usize> {
        let finished = self.shared.scan(&mut lock(&self.shared.state));
        let mut n = 0;
        for (job, status) in finished {
            n += job.advance_to(status)?;
        }
        Ok(n)
    }

    fn add_callback(&self, callback: Arc<dyn StatusCallback>) {
        self.shared.callbacks.push(callback);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec() -> LocalExecutor {
        LocalExecutor::new("local", ExecutorConfig::default(), Launchers::builtin()).unwrap()
    }

    fn run(spec: JobSpec) -> JobStatus {
        let e = exec();
        let job = Job::new(spec);
        e.submit(&job).unwrap();
        job.wait(Some(Duration::from_secs(20))).unwrap()
    }

    #[test]
    fn true_and_false() {
        let s = run(JobSpec::new("/bin/true"));
        assert_eq!((s.state, s.exit_code), (JobState::Completed, Some(0)));
        let s = run(JobSpec::new("/bin/false"));
        assert_eq!((s.state, s.exit_code), (JobState::Failed, Some(1)));
    }

    #[test]
    fn history_is_full_chain() {
        let e = exec();
        let job = Job::new(JobSpec::new("/bin/true"));
        e.submit(&job).unwrap();
        job.wait(None).unwrap();
        let states: Vec<_> = job.history().iter().map(|s| s.state).collect();
        assert_eq!(
            states,
            [JobState::New, JobState::Queued, JobState::Active, JobState::Completed]
        );
    }

    #[test]
    fn signal_death_maps_to_128_plus() {
        let s = run(JobSpec::new("/bin/sh").args(["-c", "kill -9 $$"]));
        assert_eq!((s.state, s.exit_code), (JobState::Failed, Some(137)));
    }

    #[test]
    fn multi_launcher_reports_worst_copy() {
        let mut spec = JobSpec::new("/bin/sh").args(["-c", "exit 3"]);
        spec.launcher = Some("multi".into());
        spec.resources.process_count = Some(3);
        let s = run(spec);
        assert_eq!(s.exit_code, Some(3));
    }

    #[test]
    fn multi_node_rejected() {
        let mut spec = JobSpec::new("/bin/true");
        spec.resources.node_count = Some(2);
        let job = Job::new(spec);
        assert!(matches!(exec().submit(&job), Err(Error::InvalidSpec(_))));
        assert_eq!(job.state(), JobState::New);
    }

    #[test]
    fn spawn_failure_fails_job() {
        let e = exec();
        let job = Job::new(JobSpec::new("/nonexistent/binary"));
        assert!(matches!(e.submit(&job), Err(Error::SpawnFailed(_))));
        assert_eq!(job.state(), JobState::Failed);
    }

    #[test]
    fn cancel_ends_canceled() {
        let e = exec();
        let job = Job::new(JobSpec::new("/bin/sleep").arg("60"));
        e.submit(&job).unwrap();
        e.cancel(&job).unwrap();
        let s = job.wait(Some(Duration::from_secs(10))).unwrap();
        assert_eq!(s.state, JobState::Canceled);
        assert_eq!(s.exit_code, None);
        assert_eq!(s.metadata.get("exit_code").map(String::as_str), Some("143"));
    }
}
