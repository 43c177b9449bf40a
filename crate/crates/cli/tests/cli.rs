use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn flowtrace(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtrace"))
        .arg("--config")
        .arg(fixture("pipeline.json"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn events(out: &Path) -> String {
    out.join("events.jsonl").to_string_lossy().into_owned()
}

#[test]
fn simulate_analyze_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let log = events(out);
    assert_eq!(flowtrace(out, &["simulate"]).status.code(), Some(0));
    for cmd in [&["audit"][..], &["vsm"], &["dora"], &["prioritize"], &["evaluate"]] {
        let mut args = vec!["--log", log.as_str()];
        args.extend_from_slice(cmd);
        let o = flowtrace(out, &args);
        assert_eq!(o.status.code(), Some(0), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(flowtrace(out, &["gqm", "validate"]).status.code(), Some(0));
    assert_eq!(flowtrace(out, &["report"]).status.code(), Some(0));

    let report = read(&out.join("report.json"));
    let keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["audit", "vsm", "dora", "gqm", "prioritization", "evaluation", "provenance"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(report["provenance"]["seed"], 7);
    assert!(report["gqm"]["violations"].as_array().unwrap().is_empty());

    let ci = &report["evaluation"]["its"]["M1"]["ci95"][2];
    let (lo, hi) = (ci[0].as_f64().unwrap(), ci[1].as_f64().unwrap());
    assert!(lo <= -6.8 && -6.8 <= hi, "({lo}, {hi})");

    let plot = fs::read_to_string(out.join("plots/its_M1.csv")).unwrap();
    assert!(plot.starts_with("t,segment,observed,fitted,counterfactual\n"));
    let verdicts = fs::read_to_string(out.join("verdicts.csv")).unwrap();
    assert!(verdicts.lines().nth(1).unwrap().starts_with("M1,"));
}

#[test]
fn corrupted_log_fails_the_audit_gate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(flowtrace(out, &["simulate"]).status.code(), Some(0));
    let text = fs::read_to_string(out.join("events.jsonl")).unwrap();
    let mut started = 0;
    let kept: String = text
        .lines()
        .filter(|l| {
            if !l.contains("\"event_type\":\"started\"") {
                return true;
            }
            started += 1;
            started % 10 >= 3
        })
        .map(|l| format!("{l}\n"))
        .collect();
    let corrupted = out.join("corrupted.jsonl");
    fs::write(&corrupted, kept).unwrap();

    let o = flowtrace(out, &["--log", corrupted.to_str().unwrap(), "audit"]);
    assert_eq!(o.status.code(), Some(1));
    let audit = read(&out.join("audit.json"));
    assert_eq!(audit["gate_passed"], false);
    assert!(audit["observability_fraction"].as_f64().unwrap() < 0.8);
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupted.jsonl"));
}

#[test]
fn registry_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = flowtrace(out, &["gqm", "validate"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read(&out.join("gqm.json"))["violations"], Value::Array(vec![]));

    let mut registry = read(&fixture("../../core/fixtures/case_study_registry.json"));
    let metrics = registry["metrics"].as_array_mut().unwrap();
    metrics[0]["baseline"] = Value::Null;
    let broken = out.join("broken.json");
    fs::write(&broken, registry.to_string()).unwrap();
    let o = flowtrace(out, &["--registry", broken.to_str().unwrap(), "gqm", "validate"]);
    assert_eq!(o.status.code(), Some(1));
    let violations = read(&out.join("gqm.json"))["violations"].clone();
    assert_eq!(violations.as_array().unwrap().len(), 1);
    assert_eq!(violations[0]["violation"], "incomplete_tuple");

    let o = flowtrace(out, &["gqm", "template"]);
    assert_eq!(o.status.code(), Some(0));
    let form = fs::read_to_string(out.join("gqm_template.txt")).unwrap();
    assert!(form.starts_with("Goal: "));
}

#[test]
fn input_errors_name_the_file_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = flowtrace(out, &["--log", "/nonexistent/events.jsonl", "audit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/events.jsonl"));

    let bad = out.join("bad.jsonl");
    fs::write(&bad, "{\"event_id\": 1}\nnot json\n").unwrap();
    let o = flowtrace(out, &["--log", bad.to_str().unwrap(), "ingest"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(err.contains("bad.jsonl") && err.contains("line"), "{err}");

    let o = flowtrace(out, &["prioritize", "--budget", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = flowtrace(out, &["--maturity", "7", "prioritize"]);
    assert_eq!(o.status.code(), Some(2));
    let o = flowtrace(out, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn skipped_records_are_reported_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(flowtrace(out, &["simulate"]).status.code(), Some(0));
    let mut text = fs::read_to_string(out.join("events.jsonl")).unwrap();
    text.insert_str(0, "{\"broken\": true}\n");
    let log = out.join("with_junk.jsonl");
    fs::write(&log, text).unwrap();
    let o = flowtrace(out, &["--log", log.to_str().unwrap(), "ingest"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("with_junk.jsonl:1:"));
    let summary = read(&out.join("ingest.json"));
    assert_eq!(summary["rejected"][0]["line"], 1);
}

#[test]
fn csv_ingest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(flowtrace(out, &["simulate"]).status.code(), Some(0));
    let jsonl = events(out);
    let csv_dir = out.join("csv");
    let o = flowtrace(&csv_dir, &["--log", &jsonl, "--format", "json", "ingest"]);
    assert_eq!(o.status.code(), Some(0));
    let csv_out = out.join("csv2");
    let o = Command::new(env!("CARGO_BIN_EXE_flowtrace"))
        .args(["--log", &jsonl, "--out", csv_out.to_str().unwrap(), "--format", "csv", "ingest"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let back = out.join("back");
    let o = Command::new(env!("CARGO_BIN_EXE_flowtrace"))
        .arg("--log")
        .arg(csv_out.join("events.csv"))
        .arg("--out")
        .arg(&back)
        .arg("ingest")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read(csv_dir.join("events.jsonl")).unwrap(),
        fs::read(back.join("events.jsonl")).unwrap()
    );
}

#[test]
fn gamma_routes_low_confidence_to_pilots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = flowtrace(out, &["--gamma", "0.7", "--budget", "20", "prioritize"]);
    assert_eq!(o.status.code(), Some(0));
    let p = read(&out.join("prioritization.json"));
    assert_eq!(p["piloted"], serde_json::json!(["chatops_approvals", "pipeline_parallelization"]));
    let backlog = fs::read_to_string(out.join("backlog.csv")).unwrap();
    assert!(backlog.contains("chatops_approvals,handoff_delays,0.7600,0.65,2,pilot"));
}

#[test]
fn rerunning_a_command_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(flowtrace(out, &["simulate"]).status.code(), Some(0));
    let log = events(out);
    assert_eq!(flowtrace(out, &["--log", &log, "evaluate"]).status.code(), Some(0));
    let first = fs::read(out.join("evaluation.json")).unwrap();
    assert_eq!(flowtrace(out, &["--log", &log, "evaluate"]).status.code(), Some(0));
    assert_eq!(first, fs::read(out.join("evaluation.json")).unwrap());
}
