use std::fs;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use psij_core::job::StatusCallback;
use psij_core::{
    EnvironmentPolicy, Executor, ExecutorConfig, Job, JobSpec, JobState, JobStatus, Launchers,
    LocalExecutor,
};

fn executor() -> LocalExecutor {
    LocalExecutor::new("local", ExecutorConfig::default(), Launchers::builtin()).unwrap()
}

fn sh(script: &str) -> JobSpec {
    JobSpec::new("/bin/sh").args(["-c", script])
}

fn group_alive(pgid: i32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    unsafe { libc::kill(-pgid, 0) == 0 }
}

/// Killed members are reparented and reaped by init shortly after.
fn group_gone(pgid: i32) -> bool {
    let deadline = Instant::now() + Duration::from_secs(3);
    while group_alive(pgid) {
        if Instant::now() > deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    true
}

#[test]
fn output_files_directory_and_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "from stdin\n").unwrap();
    let mut spec = sh("pwd; cat; echo oops >&2");
    spec.directory = Some(dir.path().to_path_buf());
    spec.stdin_path = Some(input);
    spec.stdout_path = Some(dir.path().join("out.txt"));
    spec.stderr_path = Some(dir.path().join("err.txt"));
    let e = executor();
    let job = Job::new(spec);
    e.submit(&job).unwrap();
    let s = job.wait(Some(Duration::from_secs(20))).unwrap();
    assert_eq!((s.state, s.exit_code), (JobState::Completed, Some(0)));
    let out = fs::read_to_string(dir.path().join("out.txt")).unwrap();
    let canon = dir.path().canonicalize().unwrap();
    assert_eq!(out, format!("{}\nfrom stdin\n", canon.display()));
    assert_eq!(fs::read_to_string(dir.path().join("err.txt")).unwrap(), "oops\n");
}

#[test]
fn merged_output_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("all.log");
    let mut spec = sh("echo one; echo two >&2; echo three");
    spec.stdout_path = Some(log.clone());
    spec.stderr_path = Some(log.clone());
    spec.attributes.merge_output = true;
    let e = executor();
    let job = Job::new(spec);
    e.submit(&job).unwrap();
    job.wait(Some(Duration::from_secs(20))).unwrap();
    assert_eq!(fs::read_to_string(&log).unwrap(), "one\ntwo\nthree\n");
}

#[test]
fn environment_policies() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var("PSIJ_TEST_INHERITED", "yes");
    let e = executor();
    let run = |policy, name: &str| {
        let mut spec = sh("echo \"${PSIJ_TEST_INHERITED:-unset} $EXTRA\"");
        spec.environment_policy = policy;
        spec.environment_overrides.insert("EXTRA".into(), "x y".into());
        spec.stdout_path = Some(dir.path().join(name));
        let job = Job::new(spec);
        e.submit(&job).unwrap();
        job.wait(Some(Duration::from_secs(20))).unwrap();
        fs::read_to_string(dir.path().join(name)).unwrap()
    };
    assert_eq!(run(None, "default"), "yes x y\n");
    assert_eq!(run(Some(EnvironmentPolicy::InheritAll), "all"), "yes x y\n");
    assert_eq!(run(Some(EnvironmentPolicy::InheritNone), "none"), "unset x y\n");
}

#[test]
fn cancel_stops_sleep_promptly() {
    let e = executor();
    let job = Job::new(JobSpec::new("/bin/sleep").arg("60"));
    e.submit(&job).unwrap();
    let pgid: i32 = job.native_id().unwrap().parse().unwrap();
    let start = Instant::now();
    e.cancel(&job).unwrap();
    let s = job.wait(Some(Duration::from_secs(10))).unwrap();
    assert_eq!(s.state, JobState::Canceled);
    assert!(start.elapsed() < Duration::from_secs(3), "{:?}", start.elapsed());
    assert!(group_gone(pgid));
    // Cancelling a finished job is refused without changing it.
    assert!(e.cancel(&job).is_err());
    assert_eq!(job.state(), JobState::Canceled);
}

#[test]
fn term_ignoring_payload_is_killed_after_grace() {
    let e = executor();
    let job = Job::new(sh("trap '' TERM; sleep 60 & wait; sleep 60"));
    e.submit(&job).unwrap();
    let pgid: i32 = job.native_id().unwrap().parse().unwrap();
    std::thread::sleep(Duration::from_millis(200));
    let start = Instant::now();
    e.cancel(&job).unwrap();
    let s = job.wait(Some(Duration::from_secs(15))).unwrap();
    let took = start.elapsed();
    assert_eq!(s.state, JobState::Canceled);
    assert!(took >= Duration::from_secs(4) && took < Duration::from_secs(9), "{took:?}");
    assert!(group_gone(pgid));
}

#[test]
fn no_orphans_after_exit() {
    let e = executor();
    let job = Job::new(sh("sleep 30 & sleep 30 & exit 3"));
    e.submit(&job).unwrap();
    let pgid: i32 = job.native_id().unwrap().parse().unwrap();
    let s = job.wait(Some(Duration::from_secs(10))).unwrap();
    assert_eq!((s.state, s.exit_code), (JobState::Failed, Some(3)));
    assert!(group_gone(pgid), "background children of the payload survived");
}

#[test]
fn exit_codes_across_range() {
    let e = executor();
    let jobs: Vec<(i32, Job)> = [0, 1, 2, 42, 127, 128, 200, 255]
        .into_iter()
        .map(|k| {
            let job = Job::new(sh(&format!("exit {k}")));
            e.submit(&job).unwrap();
            (k, job)
        })
        .collect();
    for (k, job) in jobs {
        let s = job.wait(Some(Duration::from_secs(20))).unwrap();
        let want = if k == 0 { JobState::Completed } else { JobState::Failed };
        assert_eq!((s.state, s.exit_code), (want, Some(k)));
    }
}

struct Recorder(Mutex<Vec<JobState>>);

impl StatusCallback for Recorder {
    fn job_status_changed(&self, _job: &Job, status: &JobStatus) {
        self.0.lock().unwrap().push(status.state);
    }
}

#[test]
fn executor_callbacks_see_every_transition() {
    let e = executor();
    let rec = Arc::new(Recorder(Mutex::new(Vec::new())));
    e.add_callback(rec.clone());
    let job = Job::new(JobSpec::new("/bin/true"));
    e.submit(&job).unwrap();
    job.wait(Some(Duration::from_secs(20))).unwrap();
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(
        *rec.0.lock().unwrap(),
        [JobState::Queued, JobState::Active, JobState::Completed]
    );
}

#[test]
fn dropping_executor_kills_jobs() {
    let job = Job::new(JobSpec::new("/bin/sleep").arg("60"));
    let pgid: i32 = {
        let e = executor();
        e.submit(&job).unwrap();
        job.native_id().unwrap().parse().unwrap()
    };
    assert!(group_gone(pgid));
}
