use std::fs;
use std::io::Read;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Subcommand, ValueEnum};
use psij_ci_report::{
    collect_report, parse_json_lines, parse_libtest, Environment, ReportMeta, TestReport,
    UploadOutcome, Uploader,
};

/// Exit code when a report could not be delivered and was kept for later.
pub const EXIT_SPOOLED: u8 = 75;

#[derive(Clone, Copy, ValueEnum)]
pub enum InputFormat {
    Auto,
    Libtest,
    Json,
}

#[derive(Subcommand)]
pub enum ReportCmd {
    /// Build a report from test runner output.
    Collect {
        /// Runner output; `-` reads stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        format: InputFormat,
        #[arg(long)]
        site: String,
        #[arg(long)]
        email: String,
        /// RFC 3339 run timestamp; defaults to now.
        #[arg(long)]
        timestamp: Option<DateTime<Utc>>,
        #[arg(long, default_value = "none")]
        scheduler: String,
        /// Write here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Send a report; undeliverable reports go to the outbox.
    Upload {
        report: PathBuf,
        #[arg(long, env = "PSIJ_REPORT_ENDPOINT")]
        endpoint: String,
        #[arg(long)]
        outbox: Option<PathBuf>,
    },
    /// Resend everything waiting in the outbox.
    Drain {
        #[arg(long, env = "PSIJ_REPORT_ENDPOINT")]
        endpoint: String,
        #[arg(long)]
        outbox: Option<PathBuf>,
    },
}

fn default_outbox() -> PathBuf {
    dirs::data_local_dir()
        .unwrap_or_else(std::env::temp_dir)
        .join("psij")
        .join("outbox")
}

fn read_input(input: &PathBuf) -> Result<String> {
    if input.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))
}

pub fn run(cmd: ReportCmd, json: bool) -> Result<u8> {
    match cmd {
        ReportCmd::Collect {
            input,
            format,
            site,
            email,
            timestamp,
            scheduler,
            output,
        } => {
            let text = read_input(&input)?;
            let results = match format {
                InputFormat::Libtest => parse_libtest(&text),
                InputFormat::Json => parse_json_lines(&text),
                InputFormat::Auto if text.trim_start().starts_with('{') => parse_json_lines(&text),
                InputFormat::Auto => parse_libtest(&text),
            };
            let report = collect_report(
                ReportMeta {
                    site_id: site,
                    run_timestamp: timestamp.unwrap_or_else(Utc::now),
                    submitter_email: email,
                    environment: Environment::detect(&scheduler),
                },
                results,
            );
            let problems = report.problems();
            if !problems.is_empty() {
                bail!("invalid report: {}", problems.join("; "));
            }
            let body = serde_json::to_string_pretty(&report)?;
            match output {
                Some(p) => fs::write(&p, body + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{body}"),
            }
            let t = report.totals();
            eprintln!("{} tests: {} passed, {} failed, {} skipped", t.total(), t.pass, t.fail, t.skip);
            Ok(0)
        }
        ReportCmd::Upload {
            report,
            endpoint,
            outbox,
        } => {
            let text = fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let r: TestReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", report.display()))?;
            let up = Uploader::new(endpoint, outbox.unwrap_or_else(default_outbox));
            let outcome = up.upload(&r)?;
            let hash = r.content_hash();
            Ok(match outcome {
                UploadOutcome::Accepted { duplicate, attempts } => {
                    if json {
                        println!("{}", serde_json::json!({"hash": hash, "result": "accepted", "duplicate": duplicate, "attempts": attempts}));
                    } else {
                        println!("accepted {hash}{}", if duplicate { " (duplicate)" } else { "" });
                    }
                    0
                }
                UploadOutcome::Spooled { path, last_error } => {
                    println!("spooled {hash} {}", path.display());
                    eprintln!("psij: delivery failed: {last_error}");
                    EXIT_SPOOLED
                }
                UploadOutcome::Rejected { status, body, path } => {
                    println!("rejected {hash} {}", path.display());
                    eprintln!("psij: endpoint answered {status}: {}", body.trim());
                    1
                }
            })
        }
        ReportCmd::Drain { endpoint, outbox } => {
            let s = Uploader::new(endpoint, outbox.unwrap_or_else(default_outbox)).drain()?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({"accepted": s.accepted, "rejected": s.rejected, "remaining": s.remaining})
                );
            } else {
                for h in &s.accepted {
                    println!("accepted {h}");
                }
                for h in &s.rejected {
                    println!("rejected {h}");
                }
                for h in &s.remaining {
                    println!("remaining {h}");
                }
            }
            Ok(if !s.remaining.is_empty() {
                EXIT_SPOOLED
            } else if !s.rejected.is_empty() {
                1
            } else {
                0
            })
        }
    }
}
