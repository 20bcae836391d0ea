//! Structured CI test reports and their upload to a results dashboard.
//!
//! Reports are posted as JSON to `<endpoint>/reports`. Failed deliveries are
//! kept in an outbox directory as `<content hash>.json` and can be resent
//! with [`Uploader::drain`].

mod collect;
mod report;
#[cfg(feature = "stub-server")]
pub mod stub;
mod upload;

use std::path::{Path, PathBuf};

pub use collect::{collect_report, parse_json_lines, parse_libtest, ReportMeta, TestResult};
pub use report::{
    is_valid_email, truncate_capture, Environment, Outcome, TestRecord, TestReport, Totals,
    CAPTURE_LIMIT, TRUNCATION_MARKER,
};
pub use upload::{
    outbox_file, rejected_file, DrainSummary, UploadOutcome, Uploader, DEFAULT_ATTEMPTS,
    DEFAULT_BACKOFF, HASH_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid report: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
