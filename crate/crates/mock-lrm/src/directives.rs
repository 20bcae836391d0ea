use std::path::PathBuf;

use crate::{Error, Profile, Result};

/// Directive values the mock acts on. Everything else is syntax-checked and
/// ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Directives {
    pub name: Option<String>,
    pub queue: Option<String>,
    pub output: Option<PathBuf>,
    pub error: Option<PathBuf>,
    pub inherit_env: bool,
}

fn prefix(profile: Profile) -> &'static str {
    match profile {
        Profile::Slurm => "#SBATCH",
        Profile::Pbs => "#PBS",
        Profile::Lsf => "#BSUB",
    }
}

/// Splits on whitespace, keeping double-quoted runs together (quotes removed).
fn words(s: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    let mut quoted = false;
    for c in s.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                in_word = true;
            }
            c if c.is_whitespace() && !quoted => {
                if in_word {
                    out.push(std::mem::take(&mut cur));
                    in_word = false;
                }
            }
            c => {
                cur.push(c);
                in_word = true;
            }
        }
    }
    if quoted {
        return Err(Error::InvalidDirective(format!("unterminated quote in {s:?}")));
    }
    if in_word {
        out.push(cur);
    }
    Ok(out)
}

fn positive(line: &str, value: &str) -> Result<()> {
    match value.parse::<u32>() {
        Ok(n) if n > 0 => Ok(()),
        _ => Err(Error::InvalidDirective(format!("{line}: {value:?} is not a positive integer"))),
    }
}

fn hms(line: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = value.split(':').collect();
    let ok = (1..=3).contains(&parts.len())
        && parts.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidDirective(format!("{line}: bad time {value:?}")))
    }
}

/// Parses the leading directive block of `script`. Parsing stops at the
/// first line that is neither blank nor a comment.
pub fn parse(profile: Profile, script: &str) -> Result<Directives> {
    let mut d = Directives::default();
    let pfx = prefix(profile);
    for line in script.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !trimmed.starts_with('#') {
            break;
        }
        let Some(body) = trimmed.strip_prefix(pfx) else {
            continue;
        };
        let w = words(body)?;
        let Some(opt) = w.first() else {
            return Err(Error::InvalidDirective(format!("{trimmed}: empty directive")));
        };
        if !opt.starts_with('-') || opt.len() < 2 {
            return Err(Error::InvalidDirective(format!("{trimmed}: expected an option")));
        }
        match profile {
            Profile::Slurm => slurm(&mut d, trimmed, &w)?,
            Profile::Pbs | Profile::Lsf => flag(profile, &mut d, trimmed, &w)?,
        }
    }
    Ok(d)
}

fn slurm(d: &mut Directives, line: &str, w: &[String]) -> Result<()> {
    let (key, value) = match w[0].split_once('=') {
        Some((k, v)) => (k.to_string(), Some(v.to_string())),
        None => (w[0].clone(), w.get(1).cloned()),
    };
    let need = |v: &Option<String>| {
        v.clone()
            .ok_or_else(|| Error::InvalidDirective(format!("{line}: {key} needs a value")))
    };
    match key.as_str() {
        "--job-name" | "-J" => d.name = Some(need(&value)?),
        "--partition" | "-p" => d.queue = Some(need(&value)?),
        "--output" | "-o" => d.output = Some(need(&value)?.into()),
        "--error" | "-e" => d.error = Some(need(&value)?.into()),
        "--export" => d.inherit_env = need(&value)?.eq_ignore_ascii_case("ALL"),
        "--nodes" | "--ntasks" | "--ntasks-per-node" | "--cpus-per-task" | "--gpus-per-task" => {
            positive(line, &need(&value)?)?
        }
        "--time" => hms(line, &need(&value)?)?,
        _ => {}
    }
    Ok(())
}

fn flag(profile: Profile, d: &mut Directives, line: &str, w: &[String]) -> Result<()> {
    let value = || {
        w.get(1)
            .cloned()
            .ok_or_else(|| Error::InvalidDirective(format!("{line}: {} needs a value", w[0])))
    };
    match (profile, w[0].as_str()) {
        (Profile::Pbs, "-N") | (Profile::Lsf, "-J") => d.name = Some(value()?),
        (_, "-q") => d.queue = Some(value()?),
        (_, "-o") => d.output = Some(value()?.into()),
        (_, "-e") => d.error = Some(value()?.into()),
        (Profile::Pbs, "-V") => d.inherit_env = true,
        (Profile::Pbs, "-l") => {
            let v = value()?;
            for item in v.split([':', ',']) {
                if let Some((k, n)) = item.split_once('=') {
                    match k {
                        "select" | "ncpus" | "mpiprocs" | "ngpus" => positive(line, n)?,
                        "walltime" => hms(line, n)?,
                        _ => {}
                    }
                }
            }
        }
        (Profile::Lsf, "-n") | (Profile::Lsf, "-W") => positive(line, &value()?)?,
        (Profile::Lsf, "-env") => d.inherit_env = value()?.eq_ignore_ascii_case("all"),
        _ => {}
    }
    Ok(())
}
