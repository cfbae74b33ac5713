use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hotstuff-sim"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn ideal_event_run_fills_the_pipeline() {
    let out = run(&["--protocol", "event", "--replicas", "4", "--views", "20", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert!(v["metrics"]["decisions"].as_u64().unwrap() >= 16);
    assert_eq!(v["audit"]["safety_ok"], true);
}

#[test]
fn two_phase_liveless_fixture_decides_nothing() {
    let path = fixture("liveless-two-phase.json");
    let out = run(&["--protocol", "two-phase", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["metrics"]["decisions"], 0);
    assert!(v["metrics"]["views_elapsed"].as_u64().unwrap() >= 20);
}

#[test]
fn three_phase_under_the_liveless_fixture_misses_its_expectation() {
    let path = fixture("liveless-two-phase.json");
    let out = run(&["--protocol", "event", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(json(&out)["metrics"]["decisions"].as_u64().unwrap() >= 1);
}

#[test]
fn negative_variants_exit_zero_on_violation() {
    for variant in ["vheight", "direct-parent"] {
        let out = run(&["--negative-variant", variant]);
        assert_eq!(out.status.code(), Some(0), "{variant}");
        let v = json(&out);
        assert_eq!(v["audit"]["safety_ok"], false, "{variant}");
        assert!(!v["audit"]["violations"].as_array().unwrap().is_empty());
    }
}

#[test]
fn conformant_replay_of_a_negative_fixture_fails() {
    // The fixture expects a violation; forcing the conformant protocol
    // keeps the schedule but the audit stays clean, so the run fails.
    let path = fixture("vheight-negative.json");
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["variant"] = "conformant".into();
    let patched = dir.path().join("s.json");
    std::fs::write(&patched, v.to_string()).unwrap();
    let out = run(&["--scenario", patched.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["audit"]["safety_ok"], true);
}

#[test]
fn every_bundled_fixture_meets_its_expectations() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = run(&["--scenario", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        seen += 1;
    }
    assert!(seen >= 7);
}

#[test]
fn config_errors_exit_two() {
    assert_eq!(run(&["--replicas", "4", "--faults", "2"]).status.code(), Some(2));
    assert_eq!(run(&["--protocol", "raft"]).status.code(), Some(2));
    assert_eq!(run(&["--scenario", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(run(&["--explore", "--protocol", "basic"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"replicas": 4, "colour": "blue"}"#).unwrap();
    assert_eq!(run(&["--scenario", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn csv_output_is_a_projection_of_the_json_metrics() {
    let base = ["--protocol", "chained", "--views", "12", "--seed", "3"];
    let j = json(&run(&base));
    let mut args = base.to_vec();
    args.extend(["--output", "csv"]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("field,value\n"));
    let row = |k: &str| text.lines().find_map(|l| l.strip_prefix(&format!("{k},"))).map(str::to_string);
    assert_eq!(row("decisions").unwrap(), j["metrics"]["decisions"].to_string());
    assert_eq!(row("total_authenticators").unwrap(), j["metrics"]["total_authenticators"].to_string());
}

#[test]
fn out_trace_and_tree_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let trace = dir.path().join("t.json");
    let tree = dir.path().join("tree.dot");
    let out = run(&[
        "--protocol",
        "basic",
        "--views",
        "6",
        "--out",
        report.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--dump-tree",
        tree.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["protocol"], "basic");
    let t: Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert!(!t["records"].as_array().unwrap().is_empty());
    let dot = std::fs::read_to_string(&tree).unwrap();
    assert!(dot.starts_with("digraph"));
    assert!(dot.contains("filled"), "executed nodes are highlighted");
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let args = ["--protocol", "two-phase", "--views", "15", "--seed", "99"];
    let first = run(&args).stdout;
    for _ in 0..2 {
        assert_eq!(run(&args).stdout, first);
    }
}

#[test]
fn small_exploration_reports_as_text() {
    let dir = tempfile::tempdir().unwrap();
    let bound = dir.path().join("bound.json");
    std::fs::write(&bound, r#"{"max_views": 2}"#).unwrap();
    let out = run(&["--explore", bound.to_str().unwrap(), "--protocol", "event"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max_views: 2"));
    assert!(text.contains("safety_violations: 0"));
}

#[test]
fn oversized_exploration_is_a_config_error() {
    let out = run(&["--explore", "--views", "9"]);
    assert_eq!(out.status.code(), Some(2));
}
