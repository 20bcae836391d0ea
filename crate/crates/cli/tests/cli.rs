mod common;

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use psij_ci_report::stub::StubServer;
use tempfile::TempDir;

/// An isolated home with a site configuration for `local` and `mock`.
struct Env {
    home: TempDir,
    site: MockSite,
}

impl Env {
    fn new() -> Self {
        Self::with_poll("100ms")
    }

    fn with_poll(poll: &str) -> Self {
        let home = tempfile::tempdir().unwrap();
        let site = MockSite::new();
        let config = serde_json::json!({
            "executors": {
                "local": { "work_directory": home.path().join("work") },
                "mock": {
                    "profile": "pbs",
                    "poll_interval": poll,
                    "work_directory": site.work.path(),
                    "command_prefix": site.prefix(),
                }
            }
        });
        fs::write(home.path().join("config.json"), config.to_string()).unwrap();
        Env { home, site }
    }

    fn psij(&self, args: &[&str]) -> Output {
        self.psij_with(args, &[])
    }

    fn psij_with(&self, args: &[&str], vars: &[(&str, &str)]) -> Output {
        Command::new(psij_bin())
            .args(args)
            .envs(vars.iter().copied())
            .env("HOME", self.home.path())
            .env("XDG_CONFIG_HOME", self.home.path().join(".config"))
            .env("XDG_DATA_HOME", self.home.path().join(".local/share"))
            .env("PSIJ_KIT_CONFIG", self.home.path().join("config.json"))
            .env_remove("PSIJ_PLUGIN_PATH")
            .env_remove("PSIJ_REPORT_ENDPOINT")
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Replaces client ids with `<ID>` and native ids with `<NID>`.
fn scrub(s: &str) -> String {
    let uuid = regex_lite(s);
    uuid.lines()
        .map(|l| match l.split_once("native_id=") {
            Some((pre, _)) => format!("{pre}native_id=<NID>"),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
        + if s.ends_with('\n') { "\n" } else { "" }
}

fn regex_lite(s: &str) -> String {
    s.split_inclusive(|c: char| c.is_whitespace() || c == '=')
        .map(|tok| {
            let word = tok.trim_end_matches(|c: char| c.is_whitespace() || c == '=');
            if uuid::Uuid::parse_str(word).is_ok() {
                tok.replacen(word, "<ID>", 1)
            } else {
                tok.to_string()
            }
        })
        .collect()
}

fn submitted(o: &Output) -> (String, String) {
    assert!(o.status.success(), "submit failed: {}", stderr(o));
    let out = stdout(o);
    let get = |k: &str| {
        out.lines()
            .find_map(|l| l.strip_prefix(k))
            .unwrap_or_else(|| panic!("no {k} in {out:?}"))
            .to_string()
    };
    (get("id="), get("native_id="))
}

#[test]
fn submit_then_wait_transcript() {
    let env = Env::new();
    let out = env.psij(&["submit", "--exe", "/bin/sh", "--", "-c", "exit 0"]);
    assert_eq!(scrub(&stdout(&out)), "id=<ID>\nnative_id=<NID>\n");
    let (id, _) = submitted(&out);
    let w = env.psij(&["wait", &id, "--timeout", "20s"]);
    assert_eq!(stdout(&w), "COMPLETED 0\n");
    assert_eq!(w.status.code(), Some(0));
    let s = env.psij(&["status", &id]);
    assert_eq!(scrub(&stdout(&s)), "<ID> COMPLETED 0\n");
}

#[test]
fn run_mirrors_failure_code() {
    let env = Env::new();
    let out = env.psij(&["run", "--exe", "/bin/sh", "--arg=-c", "--arg", "exit 42"]);
    assert_eq!(stdout(&out), "FAILED 42\n");
    assert_eq!(out.status.code(), Some(42));
}

#[test]
fn spec_file_and_output_paths() {
    let env = Env::new();
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "executable": "/bin/echo",
        "arguments": ["from", "spec file"],
        "stdout_path": dir.path().join("out.txt"),
    });
    let spec_path = dir.path().join("job.json");
    fs::write(&spec_path, spec.to_string()).unwrap();
    let out = env.psij(&["run", "--spec", spec_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(read(&dir.path().join("out.txt")), "from spec file\n");
}

#[test]
fn invalid_spec_exits_2() {
    let env = Env::new();
    let out = env.psij(&["submit", "--exe", "/bin/true", "--nodes", "1", "--ppn", "2", "--procs", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(
        stderr(&out),
        "psij: invalid job specification:\n  resources.process_count: product relation 1×2≠3\n"
    );
    let out = env.psij(&["submit"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scheduler_rejection_exits_3_with_native_message() {
    let env = Env::new();
    let out = env.psij(&["submit", "-e", "mock", "--exe", "/bin/true", "--custom", "l=walltime=soon"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.starts_with("psij: submit failed"), "{err}");
    assert!(err.contains("walltime"), "{err}");
}

#[test]
fn wait_timeout_exits_4_and_cancel_ends_job() {
    let env = Env::new();
    let (id, _) = submitted(&env.psij(&["submit", "--exe", "/bin/sleep", "--", "60"]));
    let w = env.psij(&["wait", &id, "--timeout", "200ms"]);
    assert_eq!(w.status.code(), Some(4));
    assert_eq!(scrub(&stdout(&env.psij(&["status", &id]))), "<ID> ACTIVE\n");
    let c = env.psij(&["cancel", &id]);
    assert_eq!(scrub(&stdout(&c)), "<ID> cancel-requested\n");
    let w = env.psij(&["wait", &id, "--timeout", "20s"]);
    assert_eq!(stdout(&w), "CANCELED -\n");
    assert_eq!(w.status.code(), Some(1));
    let c = env.psij(&["cancel", &id]);
    assert_eq!(scrub(&stdout(&c)), "<ID> CANCELED\n");
}

#[test]
fn unknown_ids_exit_5() {
    let env = Env::new();
    let s = env.psij(&["status", "00000000-0000-0000-0000-000000000001", "4242"]);
    assert_eq!(
        stdout(&s),
        "00000000-0000-0000-0000-000000000001 UNKNOWN\n4242 UNKNOWN\n"
    );
    assert_eq!(s.status.code(), Some(5));
    let w = env.psij(&["wait", "4242"]);
    assert_eq!(w.status.code(), Some(5));
    let w = env.psij(&["wait", "-e", "mock", "99.mock"]);
    assert_eq!(w.status.code(), Some(5));
}

#[test]
fn mock_executor_by_native_id() {
    let env = Env::new();
    let (id, nid) = submitted(&env.psij(&["submit", "-e", "mock", "--exe", "/bin/sh", "--", "-c", "exit 7"]));
    assert!(nid.ends_with(".mock"), "{nid}");
    let w = env.psij(&["wait", "-e", "mock", &nid, "--timeout", "30s"]);
    assert_eq!(stdout(&w), "FAILED 7\n");
    assert_eq!(w.status.code(), Some(7));
    // The client id resolves through the job record as well.
    let s = env.psij(&["status", &id]);
    assert_eq!(stdout(&s), format!("{id} FAILED 7\n"));
    let a = env.psij(&["attach", "-e", "mock", &nid]);
    assert_eq!(stdout(&a), format!("id={id} native_id={nid} state=FAILED\n"));
    assert_eq!(env.site.lrm().counters().unwrap().submit, 1);
}

#[test]
fn json_output() {
    let env = Env::new();
    let out = env.psij(&["--json", "submit", "--exe", "/bin/true"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["executor"], "local");
    let id = v["id"].as_str().unwrap().to_string();
    let w = env.psij(&["--json", "wait", &id, "--timeout", "20s"]);
    let v: serde_json::Value = serde_json::from_slice(&w.stdout).unwrap();
    assert_eq!(v["status"]["state"], "COMPLETED");
    assert_eq!(v["status"]["exit_code"], 0);
}

#[test]
fn executors_listing() {
    let env = Env::new();
    let out = env.psij(&["executors"]);
    let v = env!("CARGO_PKG_VERSION");
    assert_eq!(
        stdout(&out),
        format!(
            "executor local {v}\nexecutor lsf {v}\nexecutor mock {v}\nexecutor pbs {v}\nexecutor slurm {v}\n\
             launcher aprun\nlauncher jsrun\nlauncher mpirun\nlauncher multi\nlauncher single\nlauncher srun\n"
        )
    );
}

#[test]
fn plugins_from_search_path() {
    let env = Env::new();
    let plugins = env.home.path().join(".config/psij/plugins");
    fs::create_dir_all(&plugins).unwrap();
    fs::write(
        plugins.join("site.json"),
        r#"{"name": "site-batch", "version": "3.1.4", "entry_point": "builtin:lsf"}"#,
    )
    .unwrap();
    let out = stdout(&env.psij(&["executors"]));
    assert!(out.contains("executor site-batch 3.1.4\n"), "{out}");
}

const LIBTEST: &str = "\
running 3 tests
test a::ok ... ok
test a::bad ... FAILED
test a::later ... ignored

failures:

---- a::bad stdout ----
boom

test result: FAILED. 1 passed; 1 failed; 1 ignored; 0 measured; 0 filtered out
";

fn collect(env: &Env, dir: &Path) -> std::path::PathBuf {
    let input = dir.join("run.txt");
    fs::write(&input, LIBTEST).unwrap();
    let report = dir.join("report.json");
    let out = env.psij(&[
        "report", "collect", "--input", input.to_str().unwrap(), "--site", "desk",
        "--email", "ci@example.org", "--timestamp", "2026-01-02T03:04:05Z",
        "--scheduler", "slurm", "-o", report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stderr(&out), "3 tests: 1 passed, 1 failed, 1 skipped\n");
    report
}

#[test]
fn report_collect_upload_and_drain() {
    let env = Env::new();
    let dir = tempfile::tempdir().unwrap();
    let report = collect(&env, dir.path());
    let v: serde_json::Value = serde_json::from_str(&read(&report)).unwrap();
    assert_eq!(v["tests"][1]["name"], "a::bad");
    assert_eq!(v["tests"][1]["stdout"], "boom");

    let outbox = dir.path().join("outbox");
    let dead = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let up = env.psij(&[
        "report", "upload", report.to_str().unwrap(), "--endpoint", &dead,
        "--outbox", outbox.to_str().unwrap(),
    ]);
    assert_eq!(up.status.code(), Some(75), "{}", stderr(&up));
    assert!(stdout(&up).starts_with("spooled "));

    let stub = StubServer::start();
    let d = env.psij(&["report", "drain", "--endpoint", stub.url(), "--outbox", outbox.to_str().unwrap()]);
    assert_eq!(d.status.code(), Some(0), "{}", stderr(&d));
    assert_eq!(stdout(&d), format!("accepted {}\n", stub.accepted()[0]));

    let again = env.psij(&[
        "report", "upload", report.to_str().unwrap(), "--endpoint", stub.url(),
        "--outbox", outbox.to_str().unwrap(),
    ]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stdout(&again).ends_with(" (duplicate)\n"), "{}", stdout(&again));
}

#[test]
fn report_rejection_exits_1() {
    let env = Env::new();
    let dir = tempfile::tempdir().unwrap();
    let report = collect(&env, dir.path());
    let stub = StubServer::scripted(vec![422]);
    let outbox = dir.path().join("outbox");
    let up = env.psij(&[
        "report", "upload", report.to_str().unwrap(), "--endpoint", stub.url(),
        "--outbox", outbox.to_str().unwrap(),
    ]);
    assert_eq!(up.status.code(), Some(1));
    assert!(stdout(&up).starts_with("rejected "));
    assert!(stderr(&up).contains("422"));
}

#[test]
fn malformed_spec_file_exits_2() {
    let env = Env::new();
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("job.json");
    fs::write(&spec, r#"{"executable": "/bin/true", "nodes": 2}"#).unwrap();
    let out = env.psij(&["submit", "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown field `nodes`"), "{}", stderr(&out));
}

#[test]
fn injected_submit_fault_exits_3() {
    let env = Env::new();
    let out = env.psij_with(
        &["submit", "-e", "mock", "--exe", "/bin/true"],
        &[("MOCK_LRM_FAULTS", "submit:1")],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("injected fault"), "{}", stderr(&out));
}

#[test]
fn cancel_queued_mock_job_then_status() {
    // No background poll fires within one short-lived command.
    let env = Env::with_poll("1h");
    let slow = [("MOCK_LRM_QUEUE_LATENCY_MS", "600000")];
    let (a, _) = submitted(&env.psij_with(&["submit", "-e", "mock", "--exe", "/bin/true"], &slow));
    let (b, _) = submitted(&env.psij_with(&["submit", "-e", "mock", "--exe", "/bin/true"], &slow));
    let s = env.psij_with(&["status", &a, &b], &slow);
    assert_eq!(stdout(&s), format!("{a} QUEUED\n{b} QUEUED\n"));
    let c = env.psij_with(&["cancel", &a], &slow);
    assert_eq!(stdout(&c), format!("{a} cancel-requested\n"));
    let s = env.psij_with(&["status", &a, &b, "77.mock"], &slow);
    assert_eq!(stdout(&s), format!("{a} CANCELED\n{b} QUEUED\n77.mock UNKNOWN\n"));
    assert_eq!(s.status.code(), Some(5));
    // One bulk query for each status or cancel invocation.
    assert_eq!(env.site.lrm().counters().unwrap().status, 3);
}
