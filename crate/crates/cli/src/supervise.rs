//! Local jobs started from the command line are owned by a detached
//! `psij __supervise` process, so they outlive the submitting command and
//! later `wait`/`status`/`cancel` invocations can follow them through files
//! in the work directory:
//!
//! * `<id>.job` / `<pgid>.nid`: the usual job record and native index
//! * `<id>.supervisor`: the supervisor's pid (SIGTERM requests cancel)
//! * `<id>.status`: the terminal status as JSON, written last

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use psij_core::lrm::exit_code::{self, JobRecord};
use psij_core::{Executor, ExecutorConfig, Job, JobSpec, JobState, JobStatus, Launchers, LocalExecutor};
use uuid::Uuid;

static CANCEL: AtomicBool = AtomicBool::new(false);

extern "C" fn on_term(_: libc::c_int) {
    CANCEL.store(true, Ordering::SeqCst);
}

pub fn status_path(work: &Path, id: Uuid) -> PathBuf {
    work.join(format!("{id}.status"))
}

pub fn supervisor_path(work: &Path, id: Uuid) -> PathBuf {
    work.join(format!("{id}.supervisor"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

/// Starts a supervisor for `spec` and returns the native id once the
/// payload is running.
pub fn launch(work: &Path, id: Uuid, spec: &JobSpec) -> Result<String> {
    fs::create_dir_all(work).with_context(|| format!("creating {}", work.display()))?;
    let spec_path = work.join(format!("{id}.spec.json"));
    write_atomic(&spec_path, spec.to_json().as_bytes())?;
    let log = fs::File::create(work.join(format!("{id}.supervisor.log")))?;
    let mut child = Command::new(std::env::current_exe()?)
        .arg("__supervise")
        .arg("--work")
        .arg(work)
        .arg("--id")
        .arg(id.to_string())
        .arg("--spec")
        .arg(&spec_path)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(log)
        .process_group(0)
        .spawn()
        .context("starting supervisor")?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().expect("piped"))
        .read_line(&mut line)
        .context("reading supervisor handshake")?;
    let line = line.trim();
    if let Some(native) = line.strip_prefix("native_id=") {
        return Ok(native.to_string());
    }
    let _ = child.wait();
    Err(anyhow!(
        "{}",
        line.strip_prefix("error=").unwrap_or("supervisor exited without starting the job")
    ))
}

/// Body of the hidden `__supervise` command.
pub fn run(work: &Path, id: Uuid, spec_path: &Path) -> Result<()> {
    // SAFETY: the handler only stores to an atomic.
    unsafe {
        libc::signal(libc::SIGTERM, on_term as *const () as libc::sighandler_t);
    }
    let mut out = std::io::stdout();
    let spec = fs::read_to_string(spec_path)
        .map_err(anyhow::Error::from)
        .and_then(|t| JobSpec::from_json(&t).map_err(anyhow::Error::from));
    let spec = match spec {
        Ok(s) => s,
        Err(e) => {
            writeln!(out, "error={e}")?;
            return Err(e);
        }
    };
    let config = ExecutorConfig::default().with_work_directory(work);
    let executor = LocalExecutor::new("local", config, Launchers::builtin())?;
    let job = Job::with_id(id, spec);
    if let Err(e) = executor.submit(&job) {
        writeln!(out, "error={e}")?;
        return Err(e.into());
    }
    let native = job.native_id().expect("submitted job has a native id").to_string();
    exit_code::write_job_record(
        work,
        &JobRecord {
            id,
            native_id: native.clone(),
            executor: "local".into(),
        },
    )?;
    write_atomic(&supervisor_path(work, id), std::process::id().to_string().as_bytes())?;
    writeln!(out, "native_id={native}")?;
    out.flush()?;

    let mut cancel_sent = false;
    let status = loop {
        match job.wait(Some(Duration::from_millis(50))) {
            Ok(s) => break s,
            Err(_) => {
                if CANCEL.load(Ordering::SeqCst) && !cancel_sent {
                    cancel_sent = true;
                    let _ = executor.cancel(&job);
                }
            }
        }
    };
    if let Some(code) = status.exit_code {
        let _ = fs::write(exit_code::exit_code_path(work, id), format!("{code}\n"));
    }
    write_atomic(&status_path(work, id), serde_json::to_string(&status)?.as_bytes())?;
    let _ = fs::remove_file(spec_path);
    Ok(())
}

fn alive(pid: i32) -> bool {
    // SAFETY: signal 0 only probes for existence.
    unsafe { libc::kill(pid, 0) == 0 }
}

fn supervisor_pid(work: &Path, id: Uuid) -> Option<i32> {
    fs::read_to_string(supervisor_path(work, id))
        .ok()?
        .trim()
        .parse()
        .ok()
}

/// Current status of a supervised job.
pub fn status(work: &Path, id: Uuid) -> JobStatus {
    if let Some(s) = fs::read_to_string(status_path(work, id))
        .ok()
        .and_then(|t| serde_json::from_str::<JobStatus>(&t).ok())
    {
        return s;
    }
    match supervisor_pid(work, id) {
        Some(pid) if alive(pid) => JobStatus::new(JobState::Active),
        // The status file is written before the supervisor exits; look once
        // more in case it finished in between.
        _ => fs::read_to_string(status_path(work, id))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_else(|| {
                JobStatus::new(JobState::Failed).with_message("supervisor exited without a status")
            }),
    }
}

pub fn wait(work: &Path, id: Uuid, timeout: Option<Duration>) -> Option<JobStatus> {
    let deadline = timeout.map(|t| Instant::now() + t);
    loop {
        let s = status(work, id);
        if s.state.is_terminal() {
            return Some(s);
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return None;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Asks the supervisor to cancel. Returns false when the job is already over.
pub fn cancel(work: &Path, id: Uuid) -> bool {
    if status_path(work, id).exists() {
        return false;
    }
    match supervisor_pid(work, id) {
        // SAFETY: plain signal to the supervisor we started.
        Some(pid) if alive(pid) => unsafe { libc::kill(pid, libc::SIGTERM) == 0 },
        _ => false,
    }
}
