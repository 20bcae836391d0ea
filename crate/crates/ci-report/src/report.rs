use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Upper bound, in bytes, for each captured stream and the log excerpt,
/// truncation marker included.
pub const CAPTURE_LIMIT: usize = 64 * 1024;
pub const TRUNCATION_MARKER: &str = "\n[... output truncated ...]\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub scheduler_profile: String,
}

impl Environment {
    pub fn detect(scheduler_profile: &str) -> Self {
        Environment {
            os: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
            scheduler_profile: scheduler_profile.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestRecord {
    pub name: String,
    pub outcome: Outcome,
    pub duration_ms: u64,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub log_excerpt: String,
}

/// One CI run's results for one site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestReport {
    pub site_id: String,
    pub run_timestamp: DateTime<Utc>,
    pub submitter_email: String,
    pub environment: Environment,
    pub tests: Vec<TestRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub pass: usize,
    pub fail: usize,
    pub skip: usize,
}

impl Totals {
    pub fn total(&self) -> usize {
        self.pass + self.fail + self.skip
    }
}

/// Cuts `text` to at most [`CAPTURE_LIMIT`] bytes, ending in
/// [`TRUNCATION_MARKER`] when anything was dropped.
pub fn truncate_capture(text: &str) -> String {
    if text.len() <= CAPTURE_LIMIT {
        return text.to_string();
    }
    let mut end = CAPTURE_LIMIT - TRUNCATION_MARKER.len();
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}{TRUNCATION_MARKER}", &text[..end])
}

/// Plausible address: one `@`, non-empty local part, dotted domain, no
/// whitespace.
pub fn is_valid_email(s: &str) -> bool {
    let Some((local, domain)) = s.split_once('@') else {
        return false;
    };
    !local.is_empty()
        && !domain.contains('@')
        && !s.contains(char::is_whitespace)
        && domain.split('.').count() >= 2
        && domain.split('.').all(|p| !p.is_empty())
}

impl TestReport {
    pub fn totals(&self) -> Totals {
        let mut t = Totals::default();
        for r in &self.tests {
            match r.outcome {
                Outcome::Pass => t.pass += 1,
                Outcome::Fail => t.fail += 1,
                Outcome::Skip => t.skip += 1,
            }
        }
        t
    }

    /// Every broken invariant, as human-readable lines.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.site_id.trim().is_empty() {
            out.push("site_id is empty".to_string());
        }
        if !is_valid_email(&self.submitter_email) {
            out.push(format!("submitter_email {:?} is not an email address", self.submitter_email));
        }
        let mut seen = BTreeMap::new();
        for r in &self.tests {
            *seen.entry(r.name.as_str()).or_insert(0) += 1;
            for (field, v) in [("stdout", &r.stdout), ("stderr", &r.stderr), ("log_excerpt", &r.log_excerpt)] {
                if v.len() > CAPTURE_LIMIT {
                    out.push(format!("{}: {field} exceeds {CAPTURE_LIMIT} bytes", r.name));
                }
            }
        }
        for (name, n) in seen.into_iter().filter(|(_, n)| *n > 1) {
            out.push(format!("test name {name:?} appears {n} times"));
        }
        out
    }

    /// The wire form: compact JSON with fields in declaration order.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("report serializes")
    }

    /// Hex SHA-256 of [`TestReport::canonical_json`].
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_respects_limit_and_char_boundaries() {
        let small = "x".repeat(CAPTURE_LIMIT);
        assert_eq!(truncate_capture(&small), small);
        let big = "é".repeat(CAPTURE_LIMIT);
        let t = truncate_capture(&big);
        assert!(t.len() <= CAPTURE_LIMIT);
        assert!(t.ends_with(TRUNCATION_MARKER));
        assert!(CAPTURE_LIMIT - t.len() < 2);
    }

    #[test]
    fn emails() {
        for ok in ["a@b.org", "first.last+ci@lab.example.gov"] {
            assert!(is_valid_email(ok), "{ok}");
        }
        for bad in ["", "a", "@b.org", "a@b", "a@@b.org", "a b@c.org", "a@b..org"] {
            assert!(!is_valid_email(bad), "{bad}");
        }
    }

    #[test]
    fn hash_is_sha256_of_canonical_bytes() {
        let r = TestReport {
            site_id: "s".into(),
            run_timestamp: DateTime::from_timestamp(0, 0).unwrap(),
            submitter_email: "a@b.org".into(),
            environment: Environment {
                os: "linux".into(),
                scheduler_profile: "slurm".into(),
            },
            tests: vec![],
        };
        let json = String::from_utf8(r.canonical_json()).unwrap();
        assert_eq!(
            json,
            r#"{"site_id":"s","run_timestamp":"1970-01-01T00:00:00Z","submitter_email":"a@b.org","environment":{"os":"linux","scheduler_profile":"slurm"},"tests":[]}"#
        );
        let expected: String = Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(r.content_hash(), expected);
    }
}
