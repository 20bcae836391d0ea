//! Files kept in an executor's work directory.
//!
//! * `<job id>.ec` is written by the submit script's epilogue and holds the
//!   payload's exit code as one decimal integer and a newline.
//! * `<native id>.nid` maps a scheduler id back to the client job id, so a
//!   later process can attach by native id and still find the `.ec` file.
//! * `<job id>.job` records which executor and native id a client id belongs to.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub fn exit_code_path(work_dir: &Path, job_id: Uuid) -> PathBuf {
    work_dir.join(format!("{job_id}.ec"))
}

pub fn script_path(work_dir: &Path, job_id: Uuid) -> PathBuf {
    work_dir.join(format!("{job_id}.sh"))
}

pub fn record_path(work_dir: &Path, job_id: Uuid) -> PathBuf {
    work_dir.join(format!("{job_id}.job"))
}

pub fn native_index_path(work_dir: &Path, native_id: &str) -> PathBuf {
    let safe: String = native_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect();
    work_dir.join(format!("{safe}.nid"))
}

/// Reads a job's exit-code file. Missing or malformed files yield `None`.
pub fn read_exit_code(work_dir: &Path, job_id: Uuid) -> Option<i32> {
    let path = exit_code_path(work_dir, job_id);
    let text = fs::read_to_string(&path).ok()?;
    match text.trim().parse() {
        Ok(code) => Some(code),
        Err(_) => {
            log::warn!("{}: malformed exit-code file {text:?}", path.display());
            None
        }
    }
}

/// Persisted association between a client job id and its scheduler id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: Uuid,
    pub native_id: String,
    pub executor: String,
}

fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
    }
    fs::rename(&tmp, path)
}

pub fn write_job_record(work_dir: &Path, record: &JobRecord) -> io::Result<()> {
    let json = serde_json::to_vec(record).expect("record serializes");
    write_atomic(&record_path(work_dir, record.id), &json)?;
    write_atomic(
        &native_index_path(work_dir, &record.native_id),
        record.id.to_string().as_bytes(),
    )
}

pub fn read_job_record(work_dir: &Path, job_id: Uuid) -> Option<JobRecord> {
    let text = fs::read_to_string(record_path(work_dir, job_id)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Client job id recorded for `native_id`, if any.
pub fn lookup_native(work_dir: &Path, native_id: &str) -> Option<Uuid> {
    let text = fs::read_to_string(native_index_path(work_dir, native_id)).ok()?;
    text.trim().parse().ok()
}
