//! A simulated batch scheduler that speaks the Slurm, PBS and LSF command
//! grammars, for hermetic tests.
//!
//! All state lives in one directory (`MOCK_LRM_DIR`) and every command takes
//! an exclusive lock on it, so separate invocations see a consistent queue.
//! Time only moves on commands: each invocation first advances every job
//! whose latency has elapsed. Jobs really run (`sh script`) once they leave
//! the pending state.
//!
//! Environment:
//!
//! | variable | meaning | default |
//! |---|---|---|
//! | `MOCK_LRM_DIR` | state directory | `$TMPDIR/mock-lrm-<uid>` |
//! | `MOCK_LRM_PROFILE` | grammar for `submit`/`status`/`cancel` | `slurm` |
//! | `MOCK_LRM_CLOCK` | `wall` or `virtual` | `wall` |
//! | `MOCK_LRM_QUEUE_LATENCY_MS` | time spent pending | `0` |
//! | `MOCK_LRM_RUN_LATENCY_MS` | minimum time spent running | `0` |
//! | `MOCK_LRM_AGE_OUT_MS` | finished jobs vanish from status after this | `10000` |
//! | `MOCK_LRM_FAULTS` | e.g. `submit:1,status:3,status-corrupt:2` | none |

mod directives;
mod state;

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use directives::Directives;
pub use state::{Counters, FaultPlan, JobRecord, State, Token, Transition};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt state file: {0}")]
    CorruptState(String),
    #[error("injected fault")]
    InjectedFault,
    #[error("invalid directive: {0}")]
    InvalidDirective(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} has already finished")]
    AlreadyFinished(u64),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Which scheduler's command grammar and output format to emulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Slurm,
    Pbs,
    Lsf,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Slurm => "slurm",
            Profile::Pbs => "pbs",
            Profile::Lsf => "lsf",
        }
    }

    /// Native id as printed to clients.
    pub fn native_id(self, id: u64) -> String {
        match self {
            Profile::Pbs => format!("{id}.mock"),
            Profile::Slurm | Profile::Lsf => id.to_string(),
        }
    }

    /// Inverse of [`Profile::native_id`]; also accepts bare numbers.
    pub fn parse_id(self, s: &str) -> Option<u64> {
        let s = s.trim();
        let s = match self {
            Profile::Pbs => s.strip_suffix(".mock").unwrap_or(s),
            _ => s,
        };
        s.parse().ok()
    }

    fn job_id_var(self) -> &'static str {
        match self {
            Profile::Slurm => "SLURM_JOB_ID",
            Profile::Pbs => "PBS_JOBID",
            Profile::Lsf => "LSB_JOBID",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slurm" => Ok(Profile::Slurm),
            "pbs" => Ok(Profile::Pbs),
            "lsf" => Ok(Profile::Lsf),
            other => Err(Error::Usage(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Wall,
    /// Time advances only through [`MockLrm::advance_clock`].
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    pub dir: PathBuf,
    pub profile: Profile,
    pub clock: ClockMode,
    pub queue_latency: Duration,
    pub run_latency: Duration,
    pub age_out: Duration,
    /// Fault plan text. Reloaded whenever it differs from the text the
    /// stored plan came from.
    pub faults: Option<String>,
}

pub const DEFAULT_AGE_OUT: Duration = Duration::from_secs(10);

fn default_dir() -> PathBuf {
    // SAFETY: getuid has no failure modes.
    let uid = unsafe { libc::getuid() };
    std::env::temp_dir().join(format!("mock-lrm-{uid}"))
}

impl Settings {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Settings {
            dir: dir.into(),
            profile: Profile::Slurm,
            clock: ClockMode::Wall,
            queue_latency: Duration::ZERO,
            run_latency: Duration::ZERO,
            age_out: DEFAULT_AGE_OUT,
            faults: None,
        }
    }

    pub fn from_env() -> Result<Self> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let ms = |name: &str, default: Duration| -> Result<Duration> {
            match var(name) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map(Duration::from_millis)
                    .map_err(|_| Error::Usage(format!("{name}={v:?} is not a number of milliseconds"))),
            }
        };
        Ok(Settings {
            dir: var("MOCK_LRM_DIR").map_or_else(default_dir, PathBuf::from),
            profile: var("MOCK_LRM_PROFILE").map_or(Ok(Profile::Slurm), |p| p.parse())?,
            clock: match var("MOCK_LRM_CLOCK").as_deref() {
                None | Some("wall") => ClockMode::Wall,
                Some("virtual") => ClockMode::Virtual,
                Some(other) => {
                    return Err(Error::Usage(format!("MOCK_LRM_CLOCK={other:?}: use wall or virtual")))
                }
            },
            queue_latency: ms("MOCK_LRM_QUEUE_LATENCY_MS", Duration::ZERO)?,
            run_latency: ms("MOCK_LRM_RUN_LATENCY_MS", Duration::ZERO)?,
            age_out: ms("MOCK_LRM_AGE_OUT_MS", DEFAULT_AGE_OUT)?,
            faults: var("MOCK_LRM_FAULTS"),
        })
    }

    pub fn with_profile(mut self, profile: Profile) -> Self {
        self.profile = profile;
        self
    }

    pub fn with_clock(mut self, clock: ClockMode) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_latencies(mut self, queue: Duration, run: Duration) -> Self {
        self.queue_latency = queue;
        self.run_latency = run;
        self
    }

    pub fn with_faults(mut self, faults: impl Into<String>) -> Self {
        self.faults = Some(faults.into());
        self
    }
}

/// A script handed to a submit command.
#[derive(Debug, Clone)]
pub enum ScriptSource {
    Path(PathBuf),
    Inline(String),
}

/// One job as seen by a status query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusView {
    pub record: JobRecord,
    /// Set while a `status-corrupt` fault is active.
    pub corrupt: bool,
}

pub struct MockLrm {
    settings: Settings,
}

fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn take(slot: &mut u32) -> bool {
    if *slot > 0 {
        *slot -= 1;
        true
    } else {
        false
    }
}

const RUNNER: &str = r#"sh "$1" >"$2" 2>"$3"; echo $? >"$4.tmp"; mv "$4.tmp" "$4""#;

impl MockLrm {
    pub fn new(settings: Settings) -> Result<Self> {
        let jobs = settings.dir.join("jobs");
        fs::create_dir_all(&jobs).map_err(|e| Error::io(&jobs, e))?;
        Ok(MockLrm { settings })
    }

    pub fn from_env() -> Result<Self> {
        Self::new(Settings::from_env()?)
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    fn done_path(&self, id: u64) -> PathBuf {
        self.settings.dir.join("jobs").join(format!("{id}.done"))
    }

    /// Runs `op` on the locked, freshly ticked state and saves the result,
    /// also when `op` fails (fault counters must persist).
    fn with_state<T>(&self, op: impl FnOnce(&mut State, u64) -> Result<T>) -> Result<T> {
        let _lock = state::DirLock::acquire(&self.settings.dir)?;
        let mut st = state::load(&self.settings.dir)?;
        if self.settings.faults != st.faults_source {
            st.faults = match &self.settings.faults {
                Some(spec) => FaultPlan::parse(spec)?,
                None => FaultPlan::default(),
            };
            st.faults_source = self.settings.faults.clone();
        }
        if self.settings.clock == ClockMode::Wall {
            st.clock_ms = st.clock_ms.max(wall_ms());
        }
        let now = st.clock_ms;
        self.tick(&mut st, now);
        let result = op(&mut st, now);
        self.tick(&mut st, now);
        state::save(&self.settings.dir, &st)?;
        result
    }

    fn tick(&self, st: &mut State, now: u64) {
        for job in st.jobs.values_mut() {
            if job.token == Token::Pending && now >= job.submit_ms + job.queue_latency_ms {
                match self.start(job) {
                    Ok(pgid) => {
                        job.pgid = Some(pgid);
                        job.set_token(Token::Running, now);
                    }
                    Err(e) => {
                        let _ = fs::write(&job.error, format!("mock-lrm: cannot start job: {e}\n"));
                        job.exit_code = Some(127);
                        job.set_token(Token::Failed, now);
                    }
                }
            }
            if job.token == Token::Running
                && now >= job.start_ms.unwrap_or(now) + job.run_latency_ms
            {
                let done = self.done_path(job.id);
                if let Ok(text) = fs::read_to_string(&done) {
                    let code = text.trim().parse().unwrap_or(1);
                    job.exit_code = Some(code);
                    let token = if code == 0 { Token::Completed } else { Token::Failed };
                    job.set_token(token, now);
                }
            }
        }
    }

    fn start(&self, job: &JobRecord) -> io::Result<i32> {
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c")
            .arg(RUNNER)
            .arg("mock-lrm-runner")
            .arg(&job.script)
            .arg(&job.output)
            .arg(&job.error)
            .arg(self.done_path(job.id));
        if !job.inherit_env {
            cmd.env_clear();
            cmd.env("PATH", "/usr/local/bin:/usr/bin:/bin");
            for keep in ["HOME", "USER", "LOGNAME", "TMPDIR"] {
                if let Some(v) = std::env::var_os(keep) {
                    cmd.env(keep, v);
                }
            }
        }
        cmd.env(job.profile.job_id_var(), job.profile.native_id(job.id))
            .env("MOCK_LRM_JOB_ID", job.id.to_string())
            .current_dir(if job.cwd.is_dir() { &job.cwd } else { Path::new("/") })
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .process_group(0);
        let mut child = cmd.spawn()?;
        let pid = child.id() as i32;
        // Reaped here when the caller is long-lived; orphaned to init otherwise.
        std::thread::spawn(move || child.wait());
        Ok(pid)
    }

    /// Queues `scripts`. Either every script is accepted or none is.
    pub fn submit(&self, profile: Profile, scripts: &[ScriptSource]) -> Result<Vec<u64>> {
        let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("/"));
        let mut parsed = Vec::with_capacity(scripts.len());
        for s in scripts {
            let text = match s {
                ScriptSource::Path(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                ScriptSource::Inline(t) => t.clone(),
            };
            parsed.push(directives::parse(profile, &text));
        }
        let q = self.settings.queue_latency.as_millis() as u64;
        let r = self.settings.run_latency.as_millis() as u64;
        let jobs_dir = self.settings.dir.join("jobs");
        self.with_state(|st, now| {
            st.counters.submit += 1;
            if take(&mut st.faults.submit) {
                return Err(Error::InjectedFault);
            }
            let parsed = parsed.into_iter().collect::<Result<Vec<_>>>()?;
            let mut ids = Vec::new();
            for (src, d) in scripts.iter().zip(parsed) {
                let id = st.next_id.max(1);
                st.next_id = id + 1;
                let script = match src {
                    ScriptSource::Path(p) => {
                        if p.is_absolute() {
                            p.clone()
                        } else {
                            cwd.join(p)
                        }
                    }
                    ScriptSource::Inline(text) => {
                        let p = jobs_dir.join(format!("{id}.sh"));
                        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                        p
                    }
                };
                let mut rec = JobRecord {
                    id,
                    profile,
                    name: d.name,
                    queue: d.queue,
                    script,
                    cwd: cwd.clone(),
                    output: d.output.unwrap_or_else(|| jobs_dir.join(format!("{id}.out"))),
                    error: d.error.unwrap_or_else(|| jobs_dir.join(format!("{id}.err"))),
                    inherit_env: d.inherit_env,
                    submit_ms: now,
                    queue_latency_ms: q,
                    run_latency_ms: r,
                    token: Token::Pending,
                    history: Vec::new(),
                    start_ms: None,
                    end_ms: None,
                    exit_code: None,
                    pgid: None,
                };
                rec.set_token(Token::Pending, now);
                st.jobs.insert(id, rec);
                ids.push(id);
            }
            Ok(ids)
        })
    }

    /// Jobs with the given ids (all jobs for `None`), minus finished jobs
    /// older than the age-out period.
    pub fn status(&self, ids: Option<&[u64]>) -> Result<Vec<StatusView>> {
        let age_out = self.settings.age_out.as_millis() as u64;
        self.with_state(|st, now| {
            st.counters.status += 1;
            if take(&mut st.faults.status) {
                return Err(Error::InjectedFault);
            }
            let corrupt = take(&mut st.faults.status_corrupt);
            let visible = |j: &&JobRecord| j.end_ms.is_none_or(|end| end + age_out > now);
            let views = match ids {
                Some(ids) => ids
                    .iter()
                    .filter_map(|id| st.jobs.get(id))
                    .filter(visible)
                    .cloned()
                    .collect::<Vec<_>>(),
                None => st.jobs.values().filter(visible).cloned().collect(),
            };
            Ok(views
                .into_iter()
                .map(|record| StatusView { record, corrupt })
                .collect())
        })
    }

    /// Cancels each id; one invocation is counted for the whole batch.
    pub fn cancel_many(&self, ids: &[Option<u64>]) -> Result<Vec<Result<()>>> {
        self.with_state(|st, now| {
            st.counters.cancel += 1;
            if take(&mut st.faults.cancel) {
                return Err(Error::InjectedFault);
            }
            Ok(ids
                .iter()
                .map(|id| {
                    let id = id.ok_or_else(|| Error::UnknownJob("?".into()))?;
                    let job = st
                        .jobs
                        .get_mut(&id)
                        .ok_or_else(|| Error::UnknownJob(id.to_string()))?;
                    if job.token.is_terminal() {
                        return Err(Error::AlreadyFinished(id));
                    }
                    if let (Token::Running, Some(pgid)) = (job.token, job.pgid) {
                        if !self.done_path(id).exists() {
                            // SAFETY: plain syscall on a group we created.
                            unsafe {
                                libc::killpg(pgid, libc::SIGKILL);
                            }
                        }
                    }
                    job.set_token(Token::Cancelled, now);
                    Ok(())
                })
                .collect())
        })
    }

    pub fn cancel(&self, id: u64) -> Result<()> {
        self.cancel_many(&[Some(id)])?.pop().expect("one result")
    }

    /// Moves the virtual clock forward. Rejected in wall-clock mode.
    pub fn advance_clock(&self, by: Duration) -> Result<u64> {
        if self.settings.clock != ClockMode::Virtual {
            return Err(Error::Usage("clock advance needs MOCK_LRM_CLOCK=virtual".into()));
        }
        self.with_state(|st, _| {
            st.clock_ms += by.as_millis() as u64;
            Ok(st.clock_ms)
        })?;
        // Second pass so jobs due at the new time move now.
        self.with_state(|st, _| Ok(st.clock_ms))
    }

    /// Every job ever submitted, with its full native history.
    pub fn ledger(&self) -> Result<Vec<JobRecord>> {
        self.with_state(|st, _| Ok(st.jobs.values().cloned().collect()))
    }

    pub fn counters(&self) -> Result<Counters> {
        self.with_state(|st, _| Ok(st.counters))
    }

    /// Replaces the remaining fault plan.
    pub fn set_faults(&self, spec: &str) -> Result<()> {
        let plan = FaultPlan::parse(spec)?;
        self.with_state(|st, _| {
            st.faults = plan;
            Ok(())
        })
    }
}

/// Result of one command-line invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    fn ok(stdout: String) -> Self {
        Output {
            code: 0,
            stdout,
            stderr: String::new(),
        }
    }

    fn fail(stderr: String) -> Self {
        Output {
            code: 1,
            stdout: String::new(),
            stderr,
        }
    }
}

fn garble(token: &str) -> String {
    format!("~{}", token.chars().rev().collect::<String>())
}

fn render_status(profile: Profile, views: &[StatusView]) -> String {
    let tok = |v: &StatusView, t: &str| if v.corrupt { garble(t) } else { t.to_string() };
    let mut out = String::new();
    match profile {
        Profile::Slurm => {
            for v in views {
                let _ = writeln!(out, "{} {}", v.record.id, tok(v, v.record.token.as_str()));
            }
        }
        Profile::Lsf => {
            for v in views {
                let r = &v.record;
                let (stat, code) = match r.token {
                    Token::Pending => ("PEND", None),
                    Token::Running => ("RUN", None),
                    Token::Completed => ("DONE", Some(0)),
                    Token::Failed => ("EXIT", r.exit_code),
                    Token::Cancelled => ("EXIT", Some(130)),
                };
                let code = code.map_or("-".to_string(), |c| c.to_string());
                let _ = writeln!(out, "{}|{}|{code}", r.id, tok(v, stat));
            }
        }
        Profile::Pbs => {
            let mut jobs = serde_json::Map::new();
            for v in views {
                let r = &v.record;
                let (state, exit) = match r.token {
                    Token::Pending => ("Q", None),
                    Token::Running => ("R", None),
                    Token::Completed => ("F", Some(0)),
                    Token::Failed => ("F", Some(r.exit_code.unwrap_or(1))),
                    Token::Cancelled => ("F", Some(256 + 15)),
                };
                let mut job = serde_json::json!({
                    "Job_Name": r.name.clone().unwrap_or_else(|| "STDIN".into()),
                    "job_state": tok(v, state),
                    "queue": r.queue.clone().unwrap_or_else(|| "workq".into()),
                });
                if let Some(e) = exit {
                    job["Exit_status"] = e.into();
                }
                jobs.insert(profile.native_id(r.id), job);
            }
            out = serde_json::to_string_pretty(&serde_json::json!({
                "pbs_version": "mock",
                "Jobs": jobs,
            }))
            .expect("json");
            out.push('\n');
        }
    }
    out
}

fn submit_line(profile: Profile, id: u64, queue: Option<&str>) -> String {
    match profile {
        Profile::Slurm => format!("Submitted batch job {id}\n"),
        Profile::Pbs => format!("{}\n", profile.native_id(id)),
        Profile::Lsf => format!(
            "Job <{id}> is submitted to queue <{}>.\n",
            queue.unwrap_or("normal")
        ),
    }
}

fn cancel_error(profile: Profile, raw: &str, e: &Error) -> String {
    let gone = matches!(e, Error::AlreadyFinished(_));
    match profile {
        Profile::Slurm if gone => format!(
            "scancel: error: Kill job error on job id {raw}: Job/step already completing or completed\n"
        ),
        Profile::Slurm => {
            format!("scancel: error: Kill job error on job id {raw}: Invalid job id specified\n")
        }
        Profile::Pbs if gone => format!("qdel: Job has finished {raw}\n"),
        Profile::Pbs => format!("qdel: Unknown Job Id {raw}\n"),
        Profile::Lsf if gone => format!("Job <{raw}>: Job has already finished\n"),
        Profile::Lsf => format!("Job <{raw}>: No matching job found\n"),
    }
}

const COMMANDS: &[&str] = &[
    "sbatch", "squeue", "scancel", "qsub", "qstat", "qdel", "bsub", "bjobs", "bkill",
];

const USAGE: &str = "usage: mock-lrm <command> [args...]
scheduler commands: sbatch squeue scancel qsub qstat qdel bsub bjobs bkill
generic (MOCK_LRM_PROFILE grammar): submit status cancel
control: clock [advance <ms>] | ledger | counters | faults <plan>
";

/// Runs one command line, as the `mock-lrm` binary does. `args[0]` is the
/// command name.
pub fn dispatch(settings: Settings, args: &[String], stdin: &mut dyn Read) -> Output {
    let Some(cmd) = args.first() else {
        return Output::fail(USAGE.to_string());
    };
    let lrm = match MockLrm::new(settings) {
        Ok(l) => l,
        Err(e) => return Output::fail(format!("mock-lrm: {e}\n")),
    };
    let default = lrm.settings.profile;
    let rest = &args[1..];
    let mut run = |profile: Profile, kind: &str| -> Output {
        let result = match kind {
            "submit" => run_submit(&lrm, profile, rest, stdin),
            "status" => run_status(&lrm, profile, rest),
            _ => run_cancel(&lrm, profile, cmd, rest),
        };
        result.unwrap_or_else(|e| Output::fail(format!("{cmd}: error: {e}\n")))
    };
    match cmd.as_str() {
        "sbatch" => run(Profile::Slurm, "submit"),
        "squeue" => run(Profile::Slurm, "status"),
        "scancel" => run(Profile::Slurm, "cancel"),
        "qsub" => run(Profile::Pbs, "submit"),
        "qstat" => run(Profile::Pbs, "status"),
        "qdel" => run(Profile::Pbs, "cancel"),
        "bsub" => run(Profile::Lsf, "submit"),
        "bjobs" => run(Profile::Lsf, "status"),
        "bkill" => run(Profile::Lsf, "cancel"),
        "submit" | "mock-submit" => run(default, "submit"),
        "status" | "mock-status" => run(default, "status"),
        "cancel" | "mock-cancel" => run(default, "cancel"),
        "clock" => match rest {
            [] => lrm
                .with_state(|st, _| Ok(st.clock_ms))
                .map(|ms| Output::ok(format!("{ms}\n"))),
            [a, ms] if a == "advance" => match ms.parse() {
                Ok(ms) => lrm
                    .advance_clock(Duration::from_millis(ms))
                    .map(|now| Output::ok(format!("{now}\n"))),
                Err(_) => Err(Error::Usage(format!("{ms:?} is not a number of milliseconds"))),
            },
            _ => Err(Error::Usage("usage: mock-lrm clock [advance <ms>]".into())),
        }
        .unwrap_or_else(|e| Output::fail(format!("clock: {e}\n"))),
        "ledger" => lrm
            .ledger()
            .map(|l| Output::ok(serde_json::to_string_pretty(&l).expect("json") + "\n"))
            .unwrap_or_else(|e| Output::fail(format!("ledger: {e}\n"))),
        "counters" => lrm
            .counters()
            .map(|c| Output::ok(serde_json::to_string(&c).expect("json") + "\n"))
            .unwrap_or_else(|e| Output::fail(format!("counters: {e}\n"))),
        "faults" => match rest {
            [plan] => lrm
                .set_faults(plan)
                .map(|()| Output::ok(String::new()))
                .unwrap_or_else(|e| Output::fail(format!("faults: {e}\n"))),
            _ => Output::fail("usage: mock-lrm faults <kind:count,...>\n".into()),
        },
        "-h" | "--help" | "help" => Output::ok(USAGE.to_string()),
        other => Output::fail(format!("mock-lrm: unknown command {other:?}\n{USAGE}")),
    }
}

/// Like [`dispatch`], but also honours invocation through a symlink named
/// after a scheduler command (`argv[0]` = `sbatch`, ...).
pub fn dispatch_argv(settings: Settings, argv: &[String], stdin: &mut dyn Read) -> Output {
    let invoked = argv
        .first()
        .and_then(|a| Path::new(a).file_name())
        .and_then(|n| n.to_str())
        .unwrap_or("");
    if COMMANDS.contains(&invoked) {
        let mut args = vec![invoked.to_string()];
        args.extend_from_slice(&argv[1..]);
        dispatch(settings, &args, stdin)
    } else {
        dispatch(settings, argv.get(1..).unwrap_or(&[]), stdin)
    }
}

/// Positional arguments, skipping options. `with_value` lists options that
/// take a separate value argument.
fn positionals<'a>(args: &'a [String], with_value: &[&str]) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a.starts_with('-') {
            skip = with_value.contains(&a.as_str());
        } else {
            out.push(a.as_str());
        }
    }
    out
}

fn run_submit(lrm: &MockLrm, profile: Profile, args: &[String], stdin: &mut dyn Read) -> Result<Output> {
    let paths = positionals(args, &["-q", "-J", "-N", "-o", "-e", "-p"]);
    let scripts: Vec<ScriptSource> = if paths.is_empty() {
        let mut text = String::new();
        stdin
            .read_to_string(&mut text)
            .map_err(|e| Error::io(Path::new("<stdin>"), e))?;
        if text.trim().is_empty() {
            return Err(Error::Usage("no script given".into()));
        }
        vec![ScriptSource::Inline(text)]
    } else {
        paths.iter().map(|p| ScriptSource::Path(PathBuf::from(p))).collect()
    };
    let ids = lrm.submit(profile, &scripts)?;
    let ledger = lrm.with_state(|st, _| {
        Ok(ids
            .iter()
            .map(|id| st.jobs.get(id).and_then(|j| j.queue.clone()))
            .collect::<Vec<_>>())
    })?;
    Ok(Output::ok(
        ids.iter()
            .zip(ledger)
            .map(|(id, q)| submit_line(profile, *id, q.as_deref()))
            .collect(),
    ))
}

fn run_status(lrm: &MockLrm, profile: Profile, args: &[String]) -> Result<Output> {
    let ids: Option<Vec<String>> = match profile {
        Profile::Slurm => {
            let mut list = None;
            let mut iter = args.iter();
            while let Some(a) = iter.next() {
                if let Some(v) = a.strip_prefix("--jobs=") {
                    list = Some(v.to_string());
                } else if a == "--jobs" || a == "-j" {
                    list = iter.next().cloned();
                }
            }
            list.map(|l| l.split(',').map(str::to_string).collect())
        }
        Profile::Pbs => Some(positionals(args, &["-F"]))
            .filter(|v| !v.is_empty())
            .map(|v| v.into_iter().map(str::to_string).collect()),
        Profile::Lsf => Some(positionals(args, &["-o", "-q", "-u"]))
            .filter(|v| !v.is_empty())
            .map(|v| v.into_iter().map(str::to_string).collect()),
    };
    let ids: Option<Vec<u64>> =
        ids.map(|v| v.iter().filter_map(|s| profile.parse_id(s)).collect());
    let views = lrm.status(ids.as_deref())?;
    let mut out = String::new();
    let noheader = args.iter().any(|a| a == "--noheader" || a == "-h" || a == "-noheader");
    if !noheader && profile != Profile::Pbs {
        out.push_str(match profile {
            Profile::Slurm => "JOBID ST\n",
            _ => "JOBID|STAT|EXIT_CODE\n",
        });
    }
    out.push_str(&render_status(profile, &views));
    Ok(Output::ok(out))
}

fn run_cancel(lrm: &MockLrm, profile: Profile, cmd: &str, args: &[String]) -> Result<Output> {
    let native = COMMANDS.contains(&cmd);
    let raw = positionals(args, &["-s", "--signal"]);
    if raw.is_empty() {
        return Err(Error::Usage("no job id given".into()));
    }
    let ids: Vec<Option<u64>> = raw.iter().map(|s| profile.parse_id(s)).collect();
    let results = lrm.cancel_many(&ids)?;
    let mut out = Output::ok(String::new());
    for (r, result) in raw.iter().zip(results) {
        match result {
            Ok(()) if profile == Profile::Lsf => {
                let _ = writeln!(out.stdout, "Job <{r}> is being terminated");
            }
            Ok(()) => {}
            Err(e) => {
                out.code = 1;
                if native {
                    out.stderr.push_str(&cancel_error(profile, r, &e));
                } else {
                    let _ = writeln!(out.stderr, "{cmd}: unknown job {r}");
                }
            }
        }
    }
    Ok(out)
}
