//! The `fused-a2a` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

const DEFAULT_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");

fn run(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fused-a2a"))
        .args(args)
        .args(["--config", DEFAULT_CONFIG, "--out-dir"])
        .arg(out_dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS, 0 violations"));
}

#[test]
fn verify_with_fault_fails_with_fence_violation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--fault", "flag_before_payload", "--mode", "functional"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("FAIL"));
    assert!(text.contains("before its payload was visible"), "{text}");
}

#[test]
fn simulate_honors_flags_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["simulate", "--slice-size", "32", "--occupancy", "75%", "--policy", "oblivious", "--seed", "9", "--trace"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# config: {"));
    assert!(header.contains("\"seed\":9"));
    assert!(header.contains("\"slice_size\":32"));
    assert_eq!(
        lines.next().unwrap(),
        "experiment,batch,tables,slice_size,occupancy,policy,zero_copy,fused_time,baseline_time,ratio,skew,messages,bytes"
    );
    assert!(lines.next().unwrap().starts_with("simulate,1024,256,32,0.75,oblivious,true,"));
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("trace_fused.json")).unwrap()).unwrap();
    assert!(trace.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn sweep_selects_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--experiment", "policy_skew"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep_policy_skew.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn scaleout_prints_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["scaleout"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("fused/baseline 0.9"));
    assert!(dir.path().join("scaleout_summary.csv").exists());
}

#[test]
fn bad_flag_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--policy", "random"], dir.path());
    assert!(!o.status.success());
    let o = run(&["simulate", "--occupancy", "1.5"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn missing_config_is_reported() {
    let o = Command::new(env!("CARGO_BIN_EXE_fused-a2a"))
        .args(["simulate", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
}
