use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use crate::report::TestReport;
use crate::Error;

pub const HASH_HEADER: &str = "X-Report-Hash";
pub const DEFAULT_ATTEMPTS: u32 = 3;
pub const DEFAULT_BACKOFF: Duration = Duration::from_secs(1);
const REJECTED_SUFFIX: &str = ".rejected.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UploadOutcome {
    /// The endpoint stored the report, now or on an earlier attempt.
    Accepted { duplicate: bool, attempts: u32 },
    /// Every attempt failed transiently; the report waits in the outbox.
    Spooled { path: PathBuf, last_error: String },
    /// The endpoint refused the report. It is kept in the outbox with a
    /// rejected marker and never resent automatically.
    Rejected {
        status: u16,
        body: String,
        path: PathBuf,
    },
}

/// Result of one outbox drain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DrainSummary {
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub remaining: Vec<String>,
}

enum Attempt {
    Accepted { duplicate: bool },
    Rejected { status: u16, body: String },
    Transient(String),
}

/// Posts reports to `<endpoint>/reports`, retrying transient failures with
/// exponential backoff and spooling what cannot be delivered.
#[derive(Debug, Clone)]
pub struct Uploader {
    endpoint: String,
    outbox: PathBuf,
    attempts: u32,
    backoff: Duration,
    timeout: Duration,
}

/// File name a report is spooled under.
pub fn outbox_file(outbox: &Path, report: &TestReport) -> PathBuf {
    outbox.join(format!("{}.json", report.content_hash()))
}

pub fn rejected_file(outbox: &Path, report: &TestReport) -> PathBuf {
    outbox.join(format!("{}{REJECTED_SUFFIX}", report.content_hash()))
}

fn write_unique(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl Uploader {
    pub fn new(endpoint: impl Into<String>, outbox: impl Into<PathBuf>) -> Self {
        Uploader {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            outbox: outbox.into(),
            attempts: DEFAULT_ATTEMPTS,
            backoff: DEFAULT_BACKOFF,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_retry(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn outbox(&self) -> &Path {
        &self.outbox
    }

    fn post(&self, report: &TestReport) -> Attempt {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let url = format!("{}/reports", self.endpoint);
        let result = agent
            .post(&url)
            .header("Content-Type", "application/json")
            .header(HASH_HEADER, &report.content_hash())
            .send(&report.canonical_json()[..]);
        let mut resp = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => Attempt::Accepted {
                duplicate: body.contains("duplicate"),
            },
            409 => Attempt::Accepted { duplicate: true },
            408 | 429 => Attempt::Transient(format!("HTTP {status}")),
            400..=499 => Attempt::Rejected { status, body },
            _ => Attempt::Transient(format!("HTTP {status}: {}", body.trim())),
        }
    }

    /// Posts with retries. Returns the final attempt and how many were made.
    fn deliver(&self, report: &TestReport) -> (Attempt, u32) {
        let mut n = 0;
        loop {
            n += 1;
            let attempt = self.post(report);
            match attempt {
                Attempt::Transient(ref e) if n < self.attempts => {
                    let delay = self.backoff * 2u32.pow(n - 1);
                    log::warn!("upload attempt {n} failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                other => return (other, n),
            }
        }
    }

    fn mark_rejected(&self, report: &TestReport, status: u16, body: &str) -> Result<PathBuf, Error> {
        fs::create_dir_all(&self.outbox).map_err(|e| Error::io(&self.outbox, e))?;
        let path = rejected_file(&self.outbox, report);
        write_unique(&path, &report.canonical_json()).map_err(|e| Error::io(&path, e))?;
        let pending = outbox_file(&self.outbox, report);
        if pending.exists() {
            fs::remove_file(&pending).map_err(|e| Error::io(&pending, e))?;
        }
        log::error!("report {} rejected with HTTP {status}: {}", report.content_hash(), body.trim());
        Ok(path)
    }

    /// Uploads `report`, spooling it on persistent transient failure.
    pub fn upload(&self, report: &TestReport) -> Result<UploadOutcome, Error> {
        let problems = report.problems();
        if !problems.is_empty() {
            return Err(Error::Invalid(problems));
        }
        let (attempt, attempts) = self.deliver(report);
        match attempt {
            Attempt::Accepted { duplicate } => Ok(UploadOutcome::Accepted { duplicate, attempts }),
            Attempt::Rejected { status, body } => {
                let path = self.mark_rejected(report, status, &body)?;
                Ok(UploadOutcome::Rejected { status, body, path })
            }
            Attempt::Transient(last_error) => {
                fs::create_dir_all(&self.outbox).map_err(|e| Error::io(&self.outbox, e))?;
                let path = outbox_file(&self.outbox, report);
                write_unique(&path, &report.canonical_json()).map_err(|e| Error::io(&path, e))?;
                Ok(UploadOutcome::Spooled { path, last_error })
            }
        }
    }

    /// Resends every spooled report. Delivered reports leave the outbox,
    /// so repeating a drain never sends an accepted report twice; a report
    /// resent after an interrupted drain is deduplicated by the endpoint.
    pub fn drain(&self) -> Result<DrainSummary, Error> {
        let mut summary = DrainSummary::default();
        let entries = match fs::read_dir(&self.outbox) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(summary),
            Err(e) => return Err(Error::io(&self.outbox, e)),
        };
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.ends_with(".json") && !name.ends_with(REJECTED_SUFFIX)
            })
            .collect();
        files.sort();
        for file in files {
            let text = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let report: TestReport = serde_json::from_slice(&text)
                .map_err(|e| Error::Invalid(vec![format!("{}: {e}", file.display())]))?;
            let hash = report.content_hash();
            match self.deliver(&report).0 {
                Attempt::Accepted { .. } => {
                    fs::remove_file(&file).map_err(|e| Error::io(&file, e))?;
                    summary.accepted.push(hash);
                }
                Attempt::Rejected { status, body } => {
                    self.mark_rejected(&report, status, &body)?;
                    if file.exists() {
                        fs::remove_file(&file).map_err(|e| Error::io(&file, e))?;
                    }
                    summary.rejected.push(hash);
                }
                Attempt::Transient(e) => {
                    log::warn!("report {hash} still undeliverable: {e}");
                    summary.remaining.push(hash);
                }
            }
        }
        Ok(summary)
    }
}
