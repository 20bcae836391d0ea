mod common {
    pub mod golden_matrix;
}

use common::golden_matrix::{cases, check_all, render};

#[test]
fn matrix_has_twelve_distinct_cases() {
    let c = cases();
    assert_eq!(c.len(), 12);
    let mut scripts: Vec<String> = c.iter().map(|(_, s, p)| render(s, p)).collect();
    scripts.sort();
    scripts.dedup();
    assert_eq!(scripts.len(), 12);
}

#[test]
fn scripts_match_goldens() {
    let bad = check_all();
    assert!(bad.is_empty(), "golden mismatches: {bad:?}");
}

#[test]
fn rendering_is_deterministic() {
    for (name, spec, profile) in cases() {
        assert_eq!(render(&spec, &profile), render(&spec, &profile), "{name}");
    }
}

#[test]
fn goldens_are_valid_posix_shell() {
    for (name, spec, profile) in cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.sh");
        std::fs::write(&path, render(&spec, &profile)).unwrap();
        let st = std::process::Command::new("sh").arg("-n").arg(&path).status().unwrap();
        assert!(st.success(), "{name} does not parse");
    }
}
