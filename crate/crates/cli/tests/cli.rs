//! End-to-end checks of the command-line surface: exit codes, report
//! output, trace replay, and the registry flag.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_euicc-sim")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .canonicalize()
        .unwrap()
}

fn run_cli(args: &[&str]) -> Output {
    Command::new(binary())
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn run_passing_scenario_exits_zero() {
    let path = scenarios().join("lifecycle.scn");
    let output = run_cli(&["run", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("result: PASS"));
    assert!(stdout.contains("step 08 FAIL"), "locked disable shows up");
}

#[test]
fn run_failing_scenario_exits_one() {
    let path = scenarios().join("lock_expected_fail.scn");
    let output = run_cli(&["run", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("result: FAIL"));
    assert!(stdout.contains("6985"));
}

#[test]
fn json_report_is_machine_readable() {
    let path = scenarios().join("lifecycle.scn");
    let output = run_cli(&["run", path.to_str().unwrap(), "--json-report"]);
    assert_eq!(output.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["scenario"], "lifecycle");
    assert_eq!(report["passed"], true);
    assert!(report["expectations"].as_array().unwrap().len() >= 10);
}

#[test]
fn seed_override_is_reported() {
    let path = scenarios().join("lifecycle.scn");
    let output = run_cli(&["run", path.to_str().unwrap(), "--seed", "7", "--json-report"]);
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["passed"], true);
}

#[test]
fn validate_good_and_bad() {
    let good = scenarios().join("lifecycle.scn");
    let output = run_cli(&["validate", good.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8(output.stdout).unwrap().contains("12 steps"));

    let dir = std::env::temp_dir().join("euicc-sim-cli-test");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.scn");
    std::fs::write(&bad, "scenario broken\n[steps]\nteleport card1\n").unwrap();
    let output = run_cli(&["validate", bad.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8(output.stderr)
        .unwrap()
        .contains("unknown step"));
}

#[test]
fn trace_replay_roundtrip() {
    let dir = std::env::temp_dir().join("euicc-sim-cli-replay");
    std::fs::create_dir_all(&dir).unwrap();
    let trace = dir.join("lifecycle.trace");
    let path = scenarios().join("lifecycle.scn");
    let output = run_cli(&[
        "run",
        path.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0));

    let output = run_cli(&["replay", trace.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    assert!(String::from_utf8(output.stdout).unwrap().contains("replay ok"));

    // A corrupted trace is flagged.
    let mut text = std::fs::read_to_string(&trace).unwrap();
    text = text.replacen("\"deliver\"", "\"send\"", 1);
    std::fs::write(&trace, text).unwrap();
    let output = run_cli(&["replay", trace.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8(output.stdout).unwrap().contains("MISMATCH"));
}

#[test]
fn registry_round_trips_through_file() {
    let dir = std::env::temp_dir().join("euicc-sim-cli-registry");
    std::fs::create_dir_all(&dir).unwrap();
    let registry = dir.join("eis.jsonl");
    let _ = std::fs::remove_file(&registry);
    let path = scenarios().join("lifecycle.scn");
    let output = run_cli(&[
        "run",
        path.to_str().unwrap(),
        "--registry",
        registry.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0));
    let saved = std::fs::read_to_string(&registry).unwrap();
    assert_eq!(saved.lines().count(), 1, "one record per card");
    assert!(saved.contains("\"smsr\":\"SR2\""), "final owner persisted");
}
