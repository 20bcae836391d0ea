use std::collections::{HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::Deserialize;

use crate::report::{truncate_capture, Environment, Outcome, TestRecord, TestReport};

/// One raw test result before normalization.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TestResult {
    pub name: String,
    pub outcome: Option<Outcome>,
    pub duration_ms: u64,
    pub stdout: String,
    pub stderr: String,
    pub log: String,
}

impl TestResult {
    pub fn new(name: impl Into<String>, outcome: Outcome) -> Self {
        TestResult {
            name: name.into(),
            outcome: Some(outcome),
            ..Default::default()
        }
    }
}

/// Report header fields supplied by the caller, so collection stays a pure
/// function of its inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMeta {
    pub site_id: String,
    pub run_timestamp: DateTime<Utc>,
    pub submitter_email: String,
    pub environment: Environment,
}

/// Builds a report from `results` in order. Repeated names get a `#n`
/// suffix, captures are truncated and results without an outcome count as
/// failures.
pub fn collect_report<I>(meta: ReportMeta, results: I) -> TestReport
where
    I: IntoIterator<Item = TestResult>,
{
    let mut used: HashSet<String> = HashSet::new();
    let mut tests = Vec::new();
    for r in results {
        let base = if r.name.trim().is_empty() {
            "unnamed".to_string()
        } else {
            r.name
        };
        let mut name = base.clone();
        let mut n = 1;
        while used.contains(&name) {
            n += 1;
            name = format!("{base}#{n}");
        }
        used.insert(name.clone());
        tests.push(TestRecord {
            name,
            outcome: r.outcome.unwrap_or(Outcome::Fail),
            duration_ms: r.duration_ms,
            stdout: truncate_capture(&r.stdout),
            stderr: truncate_capture(&r.stderr),
            log_excerpt: truncate_capture(&r.log),
        });
    }
    TestReport {
        site_id: meta.site_id,
        run_timestamp: meta.run_timestamp,
        submitter_email: meta.submitter_email,
        environment: meta.environment,
        tests,
    }
}

#[derive(Deserialize)]
struct JsonLine {
    #[serde(rename = "type")]
    kind: Option<String>,
    event: Option<String>,
    name: Option<String>,
    outcome: Option<String>,
    duration_ms: Option<u64>,
    exec_time: Option<f64>,
    stdout: Option<String>,
    stderr: Option<String>,
    log: Option<String>,
}

fn outcome_word(w: &str) -> Option<Outcome> {
    match w.to_ascii_lowercase().as_str() {
        "pass" | "passed" | "ok" => Some(Outcome::Pass),
        "fail" | "failed" | "error" | "timeout" => Some(Outcome::Fail),
        "skip" | "skipped" | "ignored" => Some(Outcome::Skip),
        _ => None,
    }
}

/// Parses one JSON object per line: either `{name, outcome, duration_ms,
/// stdout, stderr, log}` records or libtest `--format json` events. Lines
/// that are neither are ignored.
pub fn parse_json_lines(text: &str) -> Vec<TestResult> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| l.starts_with('{')) {
        let Ok(j) = serde_json::from_str::<JsonLine>(line) else {
            continue;
        };
        let Some(name) = j.name else { continue };
        let outcome = match (j.kind.as_deref(), j.event.as_deref(), j.outcome.as_deref()) {
            (_, _, Some(o)) => outcome_word(o),
            (Some("test"), Some("started"), None) => continue,
            (Some("test"), Some(e), None) => outcome_word(e),
            _ => continue,
        };
        out.push(TestResult {
            name,
            outcome,
            duration_ms: j
                .duration_ms
                .or(j.exec_time.map(|s| (s * 1000.0).round() as u64))
                .unwrap_or(0),
            stdout: j.stdout.unwrap_or_default(),
            stderr: j.stderr.unwrap_or_default(),
            log: j.log.unwrap_or_default(),
        });
    }
    out
}

/// Parses the default human-readable output of the Rust test harness:
/// `test NAME ... ok|FAILED|ignored` lines, plus the captured output printed
/// under `---- NAME stdout ----` for failures.
pub fn parse_libtest(text: &str) -> Vec<TestResult> {
    let mut out: Vec<TestResult> = Vec::new();
    let mut captures: HashMap<String, String> = HashMap::new();
    let mut current: Option<(String, String)> = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("---- ") {
            if let Some(name) = rest.strip_suffix(" stdout ----") {
                if let Some((n, body)) = current.take() {
                    captures.insert(n, body);
                }
                current = Some((name.to_string(), String::new()));
                continue;
            }
        }
        if let Some((_, body)) = current.as_mut() {
            if line == "failures:" || line.starts_with("test result:") {
                let (n, body) = current.take().unwrap();
                captures.insert(n, body.trim_end().to_string());
            } else {
                body.push_str(line);
                body.push('\n');
            }
            continue;
        }
        let Some(rest) = line.strip_prefix("test ") else { continue };
        let Some((name, result)) = rest.rsplit_once(" ... ") else { continue };
        let word = result.split([' ', ',']).next().unwrap_or("");
        if let Some(outcome) = outcome_word(word) {
            out.push(TestResult::new(name.trim(), outcome));
        }
    }
    if let Some((n, body)) = current {
        captures.insert(n, body.trim_end().to_string());
    }
    for r in &mut out {
        if let Some(c) = captures.remove(&r.name) {
            r.stdout = c;
        }
    }
    out
}
