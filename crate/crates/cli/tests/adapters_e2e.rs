mod common;

use std::time::Duration;

use common::*;
use psij_core::{EnvironmentPolicy, Job, JobSpec, JobState, WallTime};
use psij_mock_lrm::Token;

const POLL: Duration = Duration::from_millis(100);
const KINDS: [&str; 3] = ["slurm", "pbs", "lsf"];

#[test]
fn output_arguments_and_attributes_reach_the_scheduler() {
    for kind in KINDS {
        let site = MockSite::new();
        let out_dir = tempfile::tempdir().unwrap();
        let e = site.executor(kind, kind, site.config(POLL));
        let mut spec = sh("echo \"$0|$1|$GREETING\"; echo warn >&2");
        spec.arguments.extend(["first arg".into(), "it's".into()]);
        spec.environment_overrides.insert("GREETING".into(), "hi there".into());
        spec.stdout_path = Some(path(&out_dir, "out"));
        spec.stderr_path = Some(path(&out_dir, "err"));
        spec.name = Some("e2e".into());
        spec.attributes.queue_name = Some("debug".into());
        spec.attributes.duration = Some(WallTime::from_secs(600));
        spec.resources.node_count = Some(1);
        spec.resources.processes_per_node = Some(1);
        let job = Job::new(spec);
        e.submit(&job).unwrap();
        let s = job.wait(Some(Duration::from_secs(30))).unwrap();
        assert_eq!((s.state, s.exit_code), (JobState::Completed, Some(0)), "{kind}");
        assert_eq!(read(&path(&out_dir, "out")), "first arg|it's|hi there\n", "{kind}");
        assert_eq!(read(&path(&out_dir, "err")), "warn\n", "{kind}");

        let ledger = site.lrm().ledger().unwrap();
        assert_eq!(ledger.len(), 1);
        let rec = &ledger[0];
        assert_eq!(rec.name.as_deref(), Some("e2e"), "{kind}");
        assert_eq!(rec.queue.as_deref(), Some("debug"), "{kind}");
        assert_eq!(rec.token, Token::Completed);
        assert_eq!(rec.exit_code, Some(0));
        let native = job.native_id().unwrap();
        assert_eq!(native, rec.profile.native_id(rec.id), "{kind}");
    }
}

#[test]
fn exit_codes_survive_every_adapter() {
    for kind in KINDS {
        let site = MockSite::new();
        let e = site.executor(kind, kind, site.config(POLL));
        let codes = [0, 1, 7, 42, 255];
        let jobs: Vec<Job> = codes
            .iter()
            .map(|k| {
                let j = Job::new(sh(&format!("exit {k}")));
                e.submit(&j).unwrap();
                j
            })
            .collect();
        for (k, s) in codes.iter().zip(wait_all(&jobs, Duration::from_secs(30))) {
            assert_eq!((s.state, s.exit_code), expected(*k), "{kind} exit {k}");
        }
    }
}

#[test]
fn cancel_through_native_command() {
    for kind in KINDS {
        let site = MockSite::new();
        let e = site.executor(kind, kind, site.config(POLL));
        let job = Job::new(JobSpec::new("/bin/sleep").arg("60"));
        e.submit(&job).unwrap();
        e.cancel(&job).unwrap();
        let s = job.wait(Some(Duration::from_secs(30))).unwrap();
        assert_eq!(s.state, JobState::Canceled, "{kind}");
        let c = site.lrm().counters().unwrap();
        assert_eq!(c.cancel, 1, "{kind}");
        assert_eq!(site.lrm().ledger().unwrap()[0].token, Token::Cancelled, "{kind}");
    }
}

#[test]
fn clean_environment_is_minimal() {
    for kind in KINDS {
        let site = MockSite::new();
        let out_dir = tempfile::tempdir().unwrap();
        std::env::set_var("PSIJ_E2E_MARKER", "leaked");
        let e = site.executor(kind, kind, site.config(POLL));
        let run = |policy: Option<EnvironmentPolicy>, name: &str| {
            let mut spec = sh("echo \"${PSIJ_E2E_MARKER:-clean}\"");
            spec.environment_policy = policy;
            spec.stdout_path = Some(path(&out_dir, name));
            let job = Job::new(spec);
            e.submit(&job).unwrap();
            job.wait(Some(Duration::from_secs(30))).unwrap();
            read(&path(&out_dir, name))
        };
        assert_eq!(run(Some(EnvironmentPolicy::InheritNone), "none"), "clean\n", "{kind}");
        assert_eq!(run(Some(EnvironmentPolicy::InheritAll), "all"), "leaked\n", "{kind}");
    }
}

#[test]
fn replicated_launch_reports_worst_copy() {
    for kind in KINDS {
        let site = MockSite::new();
        let out_dir = tempfile::tempdir().unwrap();
        let e = site.executor(kind, kind, site.config(POLL));
        let mut spec = sh("echo copy; exit 5");
        spec.launcher = Some("multi".into());
        spec.resources.process_count = Some(3);
        spec.stdout_path = Some(path(&out_dir, "out"));
        let job = Job::new(spec);
        e.submit(&job).unwrap();
        let s = job.wait(Some(Duration::from_secs(30))).unwrap();
        assert_eq!((s.state, s.exit_code), (JobState::Failed, Some(5)), "{kind}");
        assert_eq!(read(&path(&out_dir, "out")), "copy\ncopy\ncopy\n", "{kind}");
    }
}

#[test]
fn scheduler_rejection_relays_stderr() {
    let site = MockSite::new();
    let e = site.executor("slurm", "slurm", site.config(POLL));
    let mut spec = sh("true");
    spec.attributes.custom.insert("nodes".into(), "zero".into());
    let job = Job::new(spec);
    let err = e.submit(&job).unwrap_err().to_string();
    assert!(err.contains("nodes"), "{err}");
    assert_eq!(job.state(), JobState::Failed);
}

#[test]
fn mock_executor_profiles_via_registry() {
    for profile in KINDS {
        let site = MockSite::new();
        let e = site.executor("mock", profile, site.config(POLL));
        let job = Job::new(sh("exit 3"));
        e.submit(&job).unwrap();
        let s = job.wait(Some(Duration::from_secs(30))).unwrap();
        assert_eq!((s.state, s.exit_code), (JobState::Failed, Some(3)), "{profile}");
        assert_eq!(format!("{:?}", site.lrm().ledger().unwrap()[0].profile).to_lowercase(), profile);
    }
}

#[test]
fn aged_out_jobs_resolve_from_exit_code_file() {
    // Finished jobs vanish from status output almost immediately; the exit
    // code file still settles them.
    let site = MockSite::new().with_env("MOCK_LRM_AGE_OUT_MS", "0");
    let e = site.executor("slurm", "slurm", site.config(Duration::from_millis(500)));
    let job = Job::new(sh("exit 9"));
    e.submit(&job).unwrap();
    let s = job.wait(Some(Duration::from_secs(30))).unwrap();
    assert_eq!((s.state, s.exit_code), (JobState::Failed, Some(9)));
}
