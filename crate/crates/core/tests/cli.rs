mod common;

use std::fs;

use common::{distill_twice, dualkd};

#[test]
fn audit_of_default_student_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualkd(&["audit", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("reports/audit.json")).unwrap()).unwrap();
    assert_eq!(v["check"]["pass"], true);
    assert!(dir.path().join("reports/audit.txt").exists());
}

#[test]
fn tight_budget_fails_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualkd(&["audit", "--run-dir", dir.path().to_str().unwrap(), "--set", "audit.budget.memory_bytes=1000"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = dualkd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"distill": {"alpha": -1.0}}"#).unwrap();
    let out = dualkd(&["audit", "--config", cfg.to_str().unwrap(), "--run-dir", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("distill.alpha"));

    fs::write(&cfg, r#"{"train": {"batch_size": "many"}}"#).unwrap();
    let out = dualkd(&["audit", "--config", cfg.to_str().unwrap(), "--run-dir", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
}

#[test]
fn written_config_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let out = dualkd(&["audit", "--run-dir", a.to_str().unwrap(), "--seed", "11", "--set", "distill.T=3"]);
    assert!(out.status.success());
    let first = fs::read_to_string(a.join("config.json")).unwrap();
    let b = dir.path().join("b");
    let out = dualkd(&["audit", "--config", a.join("config.json").to_str().unwrap(), "--run-dir", b.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(first, fs::read_to_string(b.join("config.json")).unwrap());
    assert!(first.contains("\"seed\": 11"));
}

#[test]
fn distill_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = distill_twice(dir.path(), "7");
    assert!(!a.is_empty());
    assert_eq!(a, b);
}
