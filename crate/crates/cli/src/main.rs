//! `psij`: submit, follow and cancel jobs from the shell.

mod config;
mod report;
mod supervise;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use psij_core::lrm::exit_code;
use psij_core::{
    EnvironmentPolicy, Error, Executor, Job, JobSpec, JobState, JobStatus, Registry, Violation,
    WallTime,
};
use serde::Serialize;
use uuid::Uuid;

use crate::config::SiteConfig;

pub const EXIT_INVALID_SPEC: u8 = 2;
pub const EXIT_SUBMIT_FAILED: u8 = 3;
pub const EXIT_TIMEOUT: u8 = 4;
pub const EXIT_UNKNOWN_ID: u8 = 5;

/// An error carrying the process exit code it should produce.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn exit(code: u8, message: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        message: message.into(),
    }
    .into()
}

#[derive(Parser)]
#[command(name = "psij", version, about = "Submit, monitor and cancel jobs on batch schedulers and local processes")]
struct Cli {
    /// Emit JSON instead of line-oriented text.
    #[arg(long, global = true)]
    json: bool,
    /// Site configuration file.
    #[arg(long, global = true, env = config::CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Submit a job and print its identifiers.
    Submit(SubmitArgs),
    /// Submit a job and wait for it; exits like `wait`.
    Run {
        #[command(flatten)]
        submit: SubmitArgs,
        #[arg(long, value_parser = humantime::parse_duration)]
        timeout: Option<Duration>,
    },
    /// Wait for a job to finish. Exits 0 iff it completed.
    Wait {
        /// Client id or native id.
        id: String,
        #[arg(long, value_parser = humantime::parse_duration)]
        timeout: Option<Duration>,
        /// Executor for native ids.
        #[arg(long, short)]
        executor: Option<String>,
    },
    /// Print "ID STATE [EXIT_CODE]" for each job.
    Status {
        #[arg(required = true)]
        ids: Vec<String>,
        #[arg(long, short)]
        executor: Option<String>,
    },
    /// Request cancellation.
    Cancel {
        #[arg(required = true)]
        ids: Vec<String>,
        #[arg(long, short)]
        executor: Option<String>,
    },
    /// Look up jobs by native id.
    Attach {
        #[arg(long, short)]
        executor: Option<String>,
        #[arg(required = true)]
        native_ids: Vec<String>,
    },
    /// List available executors and launchers.
    Executors,
    /// Collect and upload CI test reports.
    #[command(subcommand)]
    Report(report::ReportCmd),
    #[command(name = "__supervise", hide = true)]
    Supervise {
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        id: Uuid,
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct SubmitArgs {
    #[arg(long, short)]
    executor: Option<String>,
    /// Job specification file (JSON). Inline flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    exe: Option<String>,
    /// Argument (repeatable). Arguments after `--` are appended too.
    #[arg(long = "arg", allow_hyphen_values = true)]
    args: Vec<String>,
    #[arg(last = true)]
    trailing: Vec<String>,
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long)]
    stdin: Option<PathBuf>,
    #[arg(long)]
    stdout: Option<PathBuf>,
    #[arg(long)]
    stderr: Option<PathBuf>,
    #[arg(long)]
    merge_output: bool,
    /// NAME=VALUE (repeatable).
    #[arg(long = "env")]
    env: Vec<String>,
    /// Start from an empty environment.
    #[arg(long, conflicts_with = "inherit_env")]
    clean_env: bool,
    #[arg(long)]
    inherit_env: bool,
    #[arg(long)]
    nodes: Option<u32>,
    #[arg(long)]
    ppn: Option<u32>,
    #[arg(long)]
    procs: Option<u32>,
    #[arg(long)]
    cpus: Option<u32>,
    #[arg(long)]
    gpus: Option<u32>,
    #[arg(long)]
    exclusive: bool,
    /// Wall time, ISO-8601 (PT1H30M) or humantime (90m).
    #[arg(long)]
    duration: Option<String>,
    #[arg(long)]
    queue: Option<String>,
    #[arg(long)]
    account: Option<String>,
    #[arg(long)]
    reservation: Option<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    launcher: Option<String>,
    /// Scheduler-specific KEY=VALUE directive (repeatable).
    #[arg(long)]
    custom: Vec<String>,
}

fn split_kv(s: &str, what: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| exit(EXIT_INVALID_SPEC, format!("{what} {s:?} is not KEY=VALUE")))
}

fn parse_walltime(s: &str) -> Result<WallTime> {
    if let Ok(w) = s.parse::<WallTime>() {
        return Ok(w);
    }
    humantime::parse_duration(s)
        .map(WallTime::from_duration)
        .map_err(|_| exit(EXIT_INVALID_SPEC, format!("duration {s:?} is neither ISO-8601 nor a humantime duration")))
}

impl SubmitArgs {
    fn build_spec(&self) -> Result<JobSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| exit(EXIT_INVALID_SPEC, format!("{}: {e}", path.display())))?;
                JobSpec::from_json(&text)
                    .map_err(|e| exit(EXIT_INVALID_SPEC, format!("{}: {e}", path.display())))?
            }
            None => JobSpec::default(),
        };
        if let Some(exe) = &self.exe {
            spec.executable = exe.clone();
        } else if self.spec.is_none() {
            return Err(exit(EXIT_INVALID_SPEC, "either --spec or --exe is required"));
        }
        if !self.args.is_empty() || !self.trailing.is_empty() {
            spec.arguments = self.args.iter().chain(&self.trailing).cloned().collect();
        }
        macro_rules! set {
            ($($field:expr => $value:expr),* $(,)?) => {$(
                if let Some(v) = $value.clone() { $field = Some(v); }
            )*};
        }
        set! {
            spec.directory => self.dir,
            spec.stdin_path => self.stdin,
            spec.stdout_path => self.stdout,
            spec.stderr_path => self.stderr,
            spec.name => self.name,
            spec.launcher => self.launcher,
            spec.resources.node_count => self.nodes,
            spec.resources.processes_per_node => self.ppn,
            spec.resources.process_count => self.procs,
            spec.resources.cpu_cores_per_process => self.cpus,
            spec.resources.gpu_cores_per_process => self.gpus,
            spec.attributes.queue_name => self.queue,
            spec.attributes.account => self.account,
            spec.attributes.reservation => self.reservation,
        }
        if self.merge_output {
            spec.attributes.merge_output = true;
            if spec.stderr_path.is_none() {
                spec.stderr_path = spec.stdout_path.clone();
            }
        }
        if self.exclusive {
            spec.resources.exclusive_node_use = Some(true);
        }
        if self.clean_env {
            spec.environment_policy = Some(EnvironmentPolicy::InheritNone);
        } else if self.inherit_env {
            spec.environment_policy = Some(EnvironmentPolicy::InheritAll);
        }
        for kv in &self.env {
            let (k, v) = split_kv(kv, "--env")?;
            spec.environment_overrides.insert(k, v);
        }
        for kv in &self.custom {
            let (k, v) = split_kv(kv, "--custom")?;
            spec.attributes.custom.insert(k, v);
        }
        if let Some(d) = &self.duration {
            spec.attributes.duration = Some(parse_walltime(d)?);
        }
        Ok(spec)
    }
}

fn violations_error(v: &[Violation]) -> anyhow::Error {
    let lines: Vec<String> = v.iter().map(|v| format!("  {v}")).collect();
    exit(EXIT_INVALID_SPEC, format!("invalid job specification:\n{}", lines.join("\n")))
}

struct Ctx {
    json: bool,
    site: SiteConfig,
    registry: Registry,
}

impl Ctx {
    fn executor(&self, name: &str) -> Result<Box<dyn Executor>> {
        self.registry
            .get_executor(name, &self.site.executor_config(name))
            .with_context(|| format!("creating executor {name:?}"))
    }

    fn work_dir(&self, name: &str) -> PathBuf {
        self.site.executor_config(name).work_directory
    }
}

#[derive(Serialize)]
struct Submitted {
    id: Uuid,
    native_id: String,
    executor: String,
}

fn submit(ctx: &Ctx, args: &SubmitArgs) -> Result<Submitted> {
    let spec = args.build_spec()?;
    let name = ctx.site.executor_name(args.executor.as_deref());
    let executor = ctx.executor(&name)?;
    let violations = executor.validate(&spec);
    if !violations.is_empty() {
        return Err(violations_error(&violations));
    }
    if name == "local" {
        drop(executor);
        let id = Uuid::new_v4();
        let native_id = supervise::launch(&ctx.work_dir(&name), id, &spec)
            .map_err(|e| exit(EXIT_SUBMIT_FAILED, format!("submit failed: {e:#}")))?;
        return Ok(Submitted {
            id,
            native_id,
            executor: name,
        });
    }
    let job = Job::new(spec);
    match executor.submit(&job) {
        Ok(()) => Ok(Submitted {
            id: job.id(),
            native_id: job.native_id().unwrap_or_default().to_string(),
            executor: name,
        }),
        Err(Error::InvalidSpec(v)) => Err(violations_error(&v)),
        Err(Error::SubmitFailed { message, stderr }) => {
            let mut m = format!("submit failed: {message}");
            if !stderr.trim().is_empty() && !message.contains(stderr.trim()) {
                m.push('\n');
                m.push_str(stderr.trim_end());
            }
            Err(exit(EXIT_SUBMIT_FAILED, m))
        }
        Err(e) => Err(exit(EXIT_SUBMIT_FAILED, format!("submit failed: {e}"))),
    }
}

/// Where a command-line id points.
#[derive(Debug, Clone)]
enum Target {
    Supervised { work: PathBuf, id: Uuid },
    Batch { executor: String, native_id: String },
}

fn resolve(ctx: &Ctx, arg: &str, executor: Option<&str>) -> Option<Target> {
    if let Ok(id) = arg.parse::<Uuid>() {
        for work in ctx.site.work_directories() {
            if let Some(rec) = exit_code::read_job_record(&work, id) {
                return Some(if rec.executor == "local" {
                    Target::Supervised { work, id }
                } else {
                    Target::Batch {
                        executor: rec.executor,
                        native_id: rec.native_id,
                    }
                });
            }
        }
        return None;
    }
    let name = ctx.site.executor_name(executor);
    if name == "local" {
        let work = ctx.work_dir(&name);
        let id = exit_code::lookup_native(&work, arg)?;
        return Some(Target::Supervised { work, id });
    }
    Some(Target::Batch {
        executor: name,
        native_id: arg.to_string(),
    })
}

/// Resolves `args` to current job states. Unknown ids map to `None`.
/// Batch jobs are looked up with one attach call per executor.
fn lookup(ctx: &Ctx, args: &[String], executor: Option<&str>) -> Result<Vec<(String, Option<Tracked>)>> {
    let targets: Vec<Option<Target>> = args.iter().map(|a| resolve(ctx, a, executor)).collect();
    let mut by_exec: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in targets.iter().enumerate() {
        if let Some(Target::Batch { executor, .. }) = t {
            by_exec.entry(executor.clone()).or_default().push(i);
        }
    }
    let mut results: Vec<Option<Tracked>> = targets
        .iter()
        .map(|t| match t {
            Some(Target::Supervised { work, id }) => Some(Tracked::Supervised {
                work: work.clone(),
                id: *id,
            }),
            _ => None,
        })
        .collect();
    for (name, idx) in by_exec {
        let exec = std::sync::Arc::new(ctx.executor(&name)?);
        let nids: Vec<&str> = idx
            .iter()
            .map(|&i| match &targets[i] {
                Some(Target::Batch { native_id, .. }) => native_id.as_str(),
                _ => unreachable!(),
            })
            .collect();
        for (&i, r) in idx.iter().zip(exec.attach_many(&nids)) {
            match r {
                Ok(job) => {
                    results[i] = Some(Tracked::Batch {
                        executor: exec.clone(),
                        job,
                    })
                }
                Err(Error::UnknownNativeId(_)) => {}
                Err(e) => return Err(anyhow!("{name}: {e}")),
            }
        }
    }
    Ok(args.iter().cloned().zip(results).collect())
}

enum Tracked {
    Supervised { work: PathBuf, id: Uuid },
    Batch {
        executor: std::sync::Arc<Box<dyn Executor>>,
        job: Job,
    },
}

impl Tracked {
    fn id(&self) -> Uuid {
        match self {
            Tracked::Supervised { id, .. } => *id,
            Tracked::Batch { job, .. } => job.id(),
        }
    }

    fn status(&self) -> JobStatus {
        match self {
            Tracked::Supervised { work, id } => supervise::status(work, *id),
            Tracked::Batch { job, .. } => job.status(),
        }
    }

    fn wait(&self, timeout: Option<Duration>) -> Option<JobStatus> {
        match self {
            Tracked::Supervised { work, id } => supervise::wait(work, *id, timeout),
            Tracked::Batch { job, .. } => job.wait(timeout).ok(),
        }
    }
}

fn code_text(s: &JobStatus) -> String {
    s.exit_code.map_or_else(|| "-".to_string(), |c| c.to_string())
}

/// 0 iff COMPLETED; a failed job's own exit code when it fits; else 1.
fn mirror_exit(s: &JobStatus) -> u8 {
    match (s.state, s.exit_code) {
        (JobState::Completed, _) => 0,
        (JobState::Failed, Some(k)) if (1..=255).contains(&k) => k as u8,
        _ => 1,
    }
}

fn print_final(ctx: &Ctx, id: Uuid, s: &JobStatus) {
    if ctx.json {
        println!(
            "{}",
            serde_json::json!({ "id": id, "status": s })
        );
    } else {
        println!("{} {}", s.state, code_text(s));
    }
}

fn wait_for(ctx: &Ctx, t: &Tracked, timeout: Option<Duration>) -> Result<u8> {
    match t.wait(timeout) {
        Some(s) => {
            print_final(ctx, t.id(), &s);
            Ok(mirror_exit(&s))
        }
        None => Err(exit(EXIT_TIMEOUT, format!("timed out waiting for {}", t.id()))),
    }
}

fn run_cmd(ctx: Ctx, cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Submit(args) => {
            let s = submit(&ctx, &args)?;
            if ctx.json {
                println!("{}", serde_json::to_string(&s)?);
            } else {
                println!("id={}", s.id);
                println!("native_id={}", s.native_id);
            }
            Ok(0)
        }
        Cmd::Run { submit: args, timeout } => {
            let s = submit(&ctx, &args)?;
            eprintln!("id={} native_id={}", s.id, s.native_id);
            let (_, t) = lookup(&ctx, &[s.id.to_string()], None)?
                .pop()
                .expect("one result");
            let t = t.ok_or_else(|| exit(EXIT_UNKNOWN_ID, format!("{}: job record vanished", s.id)))?;
            wait_for(&ctx, &t, timeout)
        }
        Cmd::Wait { id, timeout, executor } => {
            let (_, t) = lookup(&ctx, std::slice::from_ref(&id), executor.as_deref())?
                .pop()
                .expect("one result");
            let t = t.ok_or_else(|| exit(EXIT_UNKNOWN_ID, format!("unknown job {id}")))?;
            wait_for(&ctx, &t, timeout)
        }
        Cmd::Status { ids, executor } => {
            let found = lookup(&ctx, &ids, executor.as_deref())?;
            let mut unknown = false;
            let mut rows = Vec::new();
            for (arg, t) in &found {
                match t {
                    Some(t) => {
                        let s = t.status();
                        if ctx.json {
                            rows.push(serde_json::json!({
                                "id": t.id(), "state": s.state, "exit_code": s.exit_code,
                            }));
                        } else {
                            match s.exit_code {
                                Some(c) => println!("{} {} {c}", t.id(), s.state),
                                None => println!("{} {}", t.id(), s.state),
                            }
                        }
                    }
                    None => {
                        unknown = true;
                        if ctx.json {
                            rows.push(serde_json::json!({ "id": arg, "state": "UNKNOWN" }));
                        } else {
                            println!("{arg} UNKNOWN");
                        }
                    }
                }
            }
            if ctx.json {
                println!("{}", serde_json::Value::Array(rows));
            }
            Ok(if unknown { EXIT_UNKNOWN_ID } else { 0 })
        }
        Cmd::Cancel { ids, executor } => {
            let found = lookup(&ctx, &ids, executor.as_deref())?;
            let mut code = 0;
            for (arg, t) in &found {
                let line = match t {
                    None => {
                        code = EXIT_UNKNOWN_ID;
                        format!("{arg} UNKNOWN")
                    }
                    Some(Tracked::Supervised { work, id }) => {
                        if supervise::cancel(work, *id) {
                            format!("{id} cancel-requested")
                        } else {
                            format!("{id} {}", supervise::status(work, *id).state)
                        }
                    }
                    Some(Tracked::Batch { executor, job }) => match executor.cancel(job) {
                        Ok(()) => format!("{} cancel-requested", job.id()),
                        Err(Error::InvalidJobState { state, .. }) => format!("{} {state}", job.id()),
                        Err(e) => {
                            code = code.max(1);
                            format!("{} error {e}", job.id())
                        }
                    },
                };
                println!("{line}");
            }
            Ok(code)
        }
        Cmd::Attach { executor, native_ids } => {
            let found = lookup(&ctx, &native_ids, executor.as_deref())?;
            let mut code = 0;
            for (arg, t) in &found {
                match t {
                    Some(t) => {
                        let s = t.status();
                        if ctx.json {
                            println!(
                                "{}",
                                serde_json::json!({ "id": t.id(), "native_id": arg, "status": s })
                            );
                        } else {
                            println!("id={} native_id={arg} state={}", t.id(), s.state);
                        }
                    }
                    None => {
                        code = EXIT_UNKNOWN_ID;
                        eprintln!("unknown native id {arg}");
                    }
                }
            }
            Ok(code)
        }
        Cmd::Executors => {
            for name in ctx.registry.executor_names() {
                let d = ctx.registry.descriptor(name)?;
                println!("executor {name} {}", d.version);
            }
            for name in ctx.registry.launchers().names() {
                println!("launcher {name}");
            }
            Ok(0)
        }
        Cmd::Report(r) => report::run(r, ctx.json),
        Cmd::Supervise { work, id, spec } => {
            supervise::run(&work, id, &spec)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = (|| {
        let site = SiteConfig::load(cli.config.as_deref().map(Path::new))?;
        let mut registry = Registry::with_builtins();
        let report = registry.discover();
        for (path, why) in report.skipped {
            log::warn!("ignored plugin {}: {why}", path.display());
        }
        run_cmd(
            Ctx {
                json: cli.json,
                site,
                registry,
            },
            cli.command,
        )
    })();
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => match e.downcast_ref::<Exit>() {
            Some(x) => {
                eprintln!("psij: {}", x.message);
                ExitCode::from(x.code)
            }
            None => {
                eprintln!("psij: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
