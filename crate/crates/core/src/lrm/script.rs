use std::fmt::Write as _;
use std::path::Path;

use uuid::Uuid;

use super::exit_code::exit_code_path;
use super::{SchedulerKind, SchedulerProfile};
use crate::error::{Error, Result};
use crate::job::{EnvironmentPolicy, JobSpec};
use crate::launcher::{render_launch_line, LauncherDescriptor};

/// Per-job inputs besides the spec that end up in the script.
#[derive(Debug, Clone, Copy)]
pub struct ScriptContext<'a> {
    pub job_id: Uuid,
    pub work_directory: &'a Path,
}

/// Quotes `s` for POSIX sh. Tokens made only of safe characters are left
/// bare.
pub fn shell_quote(s: &str) -> String {
    let safe = !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "@%+=:,./_-".contains(c));
    if safe {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

fn quote_path(p: &Path) -> String {
    shell_quote(&p.display().to_string())
}

fn check_value(key: &str, value: &str) -> Result<()> {
    if value.contains(['\n', '\r', '\0', '"']) {
        return Err(Error::UnrenderableAttribute {
            key: key.to_string(),
            reason: "value contains a newline, NUL or double quote".into(),
        });
    }
    Ok(())
}

/// Directive argument, double-quoted when it holds whitespace.
fn directive_value(key: &str, value: &str) -> Result<String> {
    check_value(key, value)?;
    Ok(if value.contains(char::is_whitespace) || value.is_empty() {
        format!("\"{value}\"")
    } else {
        value.to_string()
    })
}

fn check_custom_key(key: &str) -> Result<()> {
    let mut chars = key.chars();
    let ok = chars.next().is_some_and(|c| c.is_ascii_alphanumeric())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::UnrenderableAttribute {
            key: key.to_string(),
            reason: "directive names may only contain letters, digits, '-', '_' and '.'".into(),
        })
    }
}

fn is_shell_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct Directives<'a> {
    prefix: &'a str,
    lines: Vec<String>,
}

impl Directives<'_> {
    fn push(&mut self, body: impl AsRef<str>) {
        self.lines.push(format!("{} {}", self.prefix, body.as_ref()));
    }
}

fn slurm_directives(spec: &JobSpec, d: &mut Directives, ctx: &ScriptContext) -> Result<()> {
    let r = &spec.resources;
    let a = &spec.attributes;
    if let Some(name) = &spec.name {
        d.push(format!("--job-name={}", directive_value("name", name)?));
    }
    if let Some(n) = r.node_count {
        d.push(format!("--nodes={n}"));
    }
    if let Some(p) = r.processes_per_node {
        d.push(format!("--ntasks-per-node={p}"));
    }
    if let Some(t) = r.process_count {
        d.push(format!("--ntasks={t}"));
    }
    if let Some(c) = r.cpu_cores_per_process {
        d.push(format!("--cpus-per-task={c}"));
    }
    if let Some(g) = r.gpu_cores_per_process.filter(|g| *g > 0) {
        d.push(format!("--gpus-per-task={g}"));
    }
    match r.exclusive_node_use {
        Some(true) => d.push("--exclusive"),
        Some(false) => d.push("--oversubscribe"),
        None => {}
    }
    if let Some(t) = a.duration {
        d.push(format!("--time={}", t.hms()));
    }
    if let Some(q) = &a.queue_name {
        d.push(format!("--partition={}", directive_value("queue_name", q)?));
    }
    if let Some(acct) = &a.account {
        d.push(format!("--account={}", directive_value("account", acct)?));
    }
    if let Some(resv) = &a.reservation {
        d.push(format!("--reservation={}", directive_value("reservation", resv)?));
    }
    d.push(match spec.environment_policy {
        Some(EnvironmentPolicy::InheritAll) => "--export=ALL",
        _ => "--export=NONE",
    });
    let (out, err) = scheduler_output_paths(ctx);
    d.push(format!("--output={out}"));
    d.push(format!("--error={err}"));
    for (key, value) in &a.custom {
        check_custom_key(key)?;
        if value.is_empty() {
            d.push(format!("--{key}"));
        } else {
            d.push(format!("--{key}={}", directive_value(key, value)?));
        }
    }
    Ok(())
}

fn pbs_directives(spec: &JobSpec, d: &mut Directives, ctx: &ScriptContext) -> Result<()> {
    let r = &spec.resources;
    let a = &spec.attributes;
    if let Some(name) = &spec.name {
        d.push(format!("-N {}", directive_value("name", name)?));
    }

    let chunks = match (r.node_count, r.per_node(), r.process_count) {
        (Some(n), Some(p), _) => Some((n, p)),
        (Some(n), None, None) => Some((n, 1)),
        (Some(n), None, Some(t)) => Some((n, t.div_ceil(n))),
        (None, Some(p), Some(t)) => Some((t.div_ceil(p), p)),
        (None, Some(p), None) => Some((1, p)),
        (None, None, Some(t)) => Some((t, 1)),
        (None, None, None) => None,
    };
    let cpus = r.cpu_cores_per_process;
    let gpus = r.gpu_cores_per_process.filter(|g| *g > 0);
    match chunks {
        Some((count, procs)) => {
            let mut select = format!(
                "select={count}:ncpus={}:mpiprocs={procs}",
                procs * cpus.unwrap_or(1)
            );
            if let Some(g) = gpus {
                let _ = write!(select, ":ngpus={}", procs * g);
            }
            d.push(format!("-l {select}"));
        }
        None => {
            if let Some(c) = cpus {
                d.push(format!("-l ncpus={c}"));
            }
            if let Some(g) = gpus {
                d.push(format!("-l ngpus={g}"));
            }
        }
    }
    let mut place = Vec::new();
    if r.node_count.is_some() {
        place.push("scatter");
    }
    match r.exclusive_node_use {
        Some(true) => place.push("excl"),
        Some(false) => place.push("shared"),
        None => {}
    }
    if !place.is_empty() {
        d.push(format!("-l place={}", place.join(":")));
    }
    if let Some(t) = a.duration {
        d.push(format!("-l walltime={}", t.hms()));
    }
    if let Some(q) = &a.queue_name {
        d.push(format!("-q {}", directive_value("queue_name", q)?));
    }
    if let Some(acct) = &a.account {
        d.push(format!("-A {}", directive_value("account", acct)?));
    }
    if let Some(resv) = &a.reservation {
        d.push(format!("-W x=ADVRES:{}", directive_value("reservation", resv)?));
    }
    if spec.environment_policy == Some(EnvironmentPolicy::InheritAll) {
        d.push("-V");
    }
    let (out, err) = scheduler_output_paths(ctx);
    d.push(format!("-o {out}"));
    d.push(format!("-e {err}"));
    for (key, value) in &a.custom {
        check_custom_key(key)?;
        if value.is_empty() {
            d.push(format!("-{key}"));
        } else {
            d.push(format!("-{key} {}", directive_value(key, value)?));
        }
    }
    Ok(())
}

fn lsf_directives(spec: &JobSpec, d: &mut Directives, ctx: &ScriptContext) -> Result<()> {
    let r = &spec.resources;
    let a = &spec.attributes;
    if let Some(name) = &spec.name {
        d.push(format!("-J {}", directive_value("name", name)?));
    }
    let total = r.total_processes().or(r.node_count);
    if let Some(t) = total {
        d.push(format!("-n {t}"));
    }
    let ptile = match (r.per_node(), r.node_count, r.process_count) {
        (Some(p), _, _) => Some(p),
        (None, Some(_), None) => Some(1),
        (None, Some(n), Some(t)) => Some(t.div_ceil(n)),
        (None, None, _) => None,
    };
    if let Some(p) = ptile {
        d.push(format!("-R \"span[ptile={p}]\""));
    }
    if let Some(c) = r.cpu_cores_per_process {
        d.push(format!("-R \"affinity[core({c})]\""));
    }
    if let Some(g) = r.gpu_cores_per_process.filter(|g| *g > 0) {
        d.push(format!("-gpu \"num={}\"", g * ptile.unwrap_or(1)));
    }
    if r.exclusive_node_use == Some(true) {
        d.push("-x");
    }
    if let Some(t) = a.duration {
        d.push(format!("-W {}", t.ceil_minutes()));
    }
    if let Some(q) = &a.queue_name {
        d.push(format!("-q {}", directive_value("queue_name", q)?));
    }
    if let Some(acct) = &a.account {
        d.push(format!("-P {}", directive_value("account", acct)?));
    }
    if let Some(resv) = &a.reservation {
        d.push(format!("-U {}", directive_value("reservation", resv)?));
    }
    d.push(match spec.environment_policy {
        Some(EnvironmentPolicy::InheritAll) => "-env \"all\"",
        _ => "-env \"none\"",
    });
    let (out, err) = scheduler_output_paths(ctx);
    d.push(format!("-o {out}"));
    d.push(format!("-e {err}"));
    for (key, value) in &a.custom {
        check_custom_key(key)?;
        if value.is_empty() {
            d.push(format!("-{key}"));
        } else {
            d.push(format!("-{key} {}", directive_value(key, value)?));
        }
    }
    Ok(())
}

/// Where the scheduler itself sends the script's stdout and stderr.
fn scheduler_output_paths(ctx: &ScriptContext) -> (String, String) {
    let out = ctx.work_directory.join(format!("{}.out", ctx.job_id));
    let err = ctx.work_directory.join(format!("{}.err", ctx.job_id));
    (out.display().to_string(), err.display().to_string())
}

fn redirections(spec: &JobSpec, append: bool) -> String {
    let mut s = String::new();
    let op = if append { ">>" } else { ">" };
    if let Some(p) = &spec.stdin_path {
        let _ = write!(s, " < {}", quote_path(p));
    }
    if let Some(p) = &spec.stdout_path {
        let _ = write!(s, " {op} {}", quote_path(p));
    }
    if spec.merges_output() {
        s.push_str(" 2>&1");
    } else if let Some(p) = &spec.stderr_path {
        let _ = write!(s, " 2{op} {}", quote_path(p));
    }
    s
}

/// Renders the POSIX shell submit script for `spec`.
///
/// The script holds the directive block, environment exports, a subshell
/// that changes directory and runs the launch line, and an epilogue that
/// always records the subshell's exit status in `<work>/<job id>.ec` before
/// exiting with it. Output is a pure function of the inputs.
pub fn render_submit_script(
    spec: &JobSpec,
    profile: &SchedulerProfile,
    launcher: &LauncherDescriptor,
    ctx: &ScriptContext,
) -> Result<String> {
    let line = render_launch_line(launcher, spec)?;

    let mut directives = Directives {
        prefix: &profile.directive_prefix,
        lines: Vec::new(),
    };
    match profile.kind {
        SchedulerKind::Slurm => slurm_directives(spec, &mut directives, ctx)?,
        SchedulerKind::Pbs => pbs_directives(spec, &mut directives, ctx)?,
        SchedulerKind::Lsf => lsf_directives(spec, &mut directives, ctx)?,
    }

    let mut s = String::from("#!/bin/sh\n");
    for l in &directives.lines {
        s.push_str(l);
        s.push('\n');
    }
    s.push('\n');

    if !spec.environment_overrides.is_empty() {
        for (name, value) in &spec.environment_overrides {
            if !is_shell_identifier(name) {
                return Err(Error::UnrenderableAttribute {
                    key: name.clone(),
                    reason: "environment variable name is not a shell identifier".into(),
                });
            }
            let _ = writeln!(s, "export {name}={}", shell_quote(value));
        }
        s.push('\n');
    }

    let command = line
        .tokens
        .iter()
        .map(|t| shell_quote(t))
        .collect::<Vec<_>>()
        .join(" ");
    s.push_str("(\n");
    if let Some(dir) = &spec.directory {
        let _ = writeln!(s, "  cd {} || exit 1", quote_path(dir));
    }
    if line.copies <= 1 {
        let _ = writeln!(s, "  {command}{}", redirections(spec, false));
    } else {
        if let Some(p) = &spec.stdout_path {
            let _ = writeln!(s, "  : > {}", quote_path(p));
        }
        if let Some(p) = spec.stderr_path.as_ref().filter(|_| !spec.merges_output()) {
            let _ = writeln!(s, "  : > {}", quote_path(p));
        }
        let _ = writeln!(
            s,
            "  psij_rank=0\n  psij_pids=\n  while [ \"$psij_rank\" -lt {} ]; do",
            line.copies
        );
        let _ = writeln!(s, "    {command}{} &", redirections(spec, true));
        s.push_str("    psij_pids=\"$psij_pids $!\"\n");
        s.push_str("    psij_rank=$((psij_rank + 1))\n  done\n");
        s.push_str("  psij_worst=0\n  for psij_pid in $psij_pids; do\n");
        s.push_str("    wait \"$psij_pid\"\n    psij_rc=$?\n");
        s.push_str(
            "    if [ \"$psij_rc\" -gt \"$psij_worst\" ]; then psij_worst=$psij_rc; fi\n  done\n",
        );
        s.push_str("  exit \"$psij_worst\"\n");
    }
    s.push_str(")\n");

    let ec = exit_code_path(ctx.work_directory, ctx.job_id);
    let ec_tmp = ec.with_extension("ec.tmp");
    s.push_str("psij_ec=$?\n");
    let _ = writeln!(
        s,
        "echo \"$psij_ec\" > {} && mv {} {}",
        quote_path(&ec_tmp),
        quote_path(&ec_tmp),
        quote_path(&ec)
    );
    s.push_str("exit \"$psij_ec\"\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::job::{JobAttributes, ResourceSpec};
    use crate::launcher::Launchers;

    fn ctx(work: &Path) -> ScriptContext<'_> {
        ScriptContext {
            job_id: Uuid::nil(),
            work_directory: work,
        }
    }

    fn render(spec: &JobSpec, profile: &SchedulerProfile) -> Result<String> {
        let launchers = Launchers::builtin();
        render_submit_script(
            spec,
            profile,
            launchers.for_spec(spec).unwrap(),
            &ctx(Path::new("/work")),
        )
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("abc-1.2/x"), "abc-1.2/x");
        assert_eq!(shell_quote(""), "''");
        assert_eq!(shell_quote("a b"), "'a b'");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
        assert_eq!(shell_quote("$HOME;rm"), "'$HOME;rm'");
    }

    #[test]
    fn slurm_geometry_and_time() {
        let mut spec = JobSpec::new("app");
        spec.resources = ResourceSpec {
            node_count: Some(2),
            processes_per_node: Some(4),
            ..Default::default()
        };
        spec.attributes = JobAttributes {
            duration: Some("PT10M".parse().unwrap()),
            queue_name: Some("batch".into()),
            ..Default::default()
        };
        let s = render(&spec, &SchedulerProfile::slurm()).unwrap();
        for line in [
            "#SBATCH --nodes=2\n",
            "#SBATCH --ntasks-per-node=4\n",
            "#SBATCH --time=00:10:00\n",
            "#SBATCH --partition=batch\n",
        ] {
            assert!(s.contains(line), "missing {line:?} in\n{s}");
        }
    }

    #[test]
    fn empty_spec_has_no_resource_directives() {
        let spec = JobSpec::new("/bin/true");
        for p in [SchedulerProfile::slurm(), SchedulerProfile::pbs(), SchedulerProfile::lsf()] {
            let s = render(&spec, &p).unwrap();
            let directives: Vec<&str> = s
                .lines()
                .filter(|l| l.starts_with(&p.directive_prefix))
                .collect();
            for d in &directives {
                assert!(
                    d.contains("/work/") || d.contains("export") || d.contains("-env"),
                    "unexpected directive {d:?}"
                );
            }
            assert!(s.contains("/work/00000000-0000-0000-0000-000000000000.ec"));
        }
    }

    #[test]
    fn deterministic() {
        let mut spec = JobSpec::new("app").args(["a b", "c"]);
        spec.attributes.custom.insert("constraint".into(), "haswell".into());
        spec.environment_overrides.insert("X".into(), "1 2".into());
        for p in [SchedulerProfile::slurm(), SchedulerProfile::pbs(), SchedulerProfile::lsf()] {
            assert_eq!(render(&spec, &p).unwrap(), render(&spec, &p).unwrap());
        }
    }

    #[test]
    fn native_duration_formats() {
        let mut spec = JobSpec::new("app");
        spec.attributes.duration = Some("PT1H0M30S".parse().unwrap());
        assert!(render(&spec, &SchedulerProfile::slurm())
            .unwrap()
            .contains("#SBATCH --time=01:00:30\n"));
        assert!(render(&spec, &SchedulerProfile::pbs())
            .unwrap()
            .contains("#PBS -l walltime=01:00:30\n"));
        assert!(render(&spec, &SchedulerProfile::lsf())
            .unwrap()
            .contains("#BSUB -W 61\n"));
    }

    #[test]
    fn bad_custom_attribute() {
        let mut spec = JobSpec::new("app");
        spec.attributes.custom.insert("bad key".into(), "v".into());
        assert!(matches!(
            render(&spec, &SchedulerProfile::slurm()),
            Err(Error::UnrenderableAttribute { .. })
        ));
        let mut spec = JobSpec::new("app");
        spec.attributes.custom.insert("ok".into(), "line\nbreak".into());
        assert!(matches!(
            render(&spec, &SchedulerProfile::pbs()),
            Err(Error::UnrenderableAttribute { .. })
        ));
    }

    #[test]
    fn merged_output() {
        let mut spec = JobSpec::new("app");
        spec.stdout_path = Some("/o".into());
        spec.stderr_path = Some("/o".into());
        spec.attributes.merge_output = true;
        let s = render(&spec, &SchedulerProfile::slurm()).unwrap();
        assert!(s.contains("  app > /o 2>&1\n"), "{s}");
    }
}
