mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{completion_body, fixtures, TestServer};
use plrh_core::store::{Store, PREDICTIONS_LOG, TRAIN_LOG};
use serde_json::Value;

fn plrh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plrh")).args(args).output().unwrap()
}

fn conf() -> String {
    fixtures().join("run.conf").display().to_string()
}

fn store_flag(dir: &Path) -> String {
    format!("store={}", dir.display())
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn event<'a>(lines: &'a [Value], name: &str) -> &'a Value {
    lines.iter().find(|v| v["event"] == name).unwrap_or_else(|| panic!("no {name} event"))
}

#[test]
fn run_writes_predictions_and_reruns_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let set = store_flag(dir.path());
    let o = plrh(&["run", "--config", &conf(), "--set", &set]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(dir.path().join("predictions.jsonl")).unwrap();
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 8);
    assert!(dir.path().join("run_manifest").exists());

    let o = plrh(&["run", "--config", &conf(), "--set", &set, "--json-lines"]);
    assert_eq!(o.status.code(), Some(0));
    let lines = json_lines(&o);
    assert_eq!(event(&lines, "run")["backend_calls"], 0);
    assert_eq!(fs::read(dir.path().join("predictions.jsonl")).unwrap(), first);
}

#[test]
fn json_lines_mirror_human_output() {
    let dir = tempfile::tempdir().unwrap();
    let set = store_flag(dir.path());
    let human = plrh(&["run", "--config", &conf(), "--set", &set, "--dry-run"]);
    let json = plrh(&["run", "--config", &conf(), "--set", &set, "--dry-run", "--json-lines"]);
    assert_eq!(stdout(&human).lines().count(), json_lines(&json).len());
    let lines = json_lines(&json);
    assert_eq!(event(&lines, "run")["backend_calls"], 0);
    assert_eq!(event(&lines, "run")["dry_run"], true);
}

#[test]
fn every_stage_honors_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let set = store_flag(dir.path());
    for sub in ["stage1", "stage2", "stage3", "run"] {
        let o = plrh(&[sub, "--config", &conf(), "--set", &set, "--dry-run", "--json-lines"]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        for line in json_lines(&o).iter().filter(|v| v["event"] == "stage") {
            assert_eq!(line["report"]["backend_calls"], 0, "{sub}");
            assert!(line["report"]["failures"].as_array().unwrap().is_empty(), "{sub}");
        }
    }
    let o = plrh(&["sweep", "--config", &conf(), "--set", &set, "--dry-run", "--n-values", "1,2"]);
    assert_eq!(o.status.code(), Some(0));
    for name in [TRAIN_LOG, PREDICTIONS_LOG, "predictions.jsonl", "sweep.csv"] {
        let len = fs::metadata(dir.path().join(name)).map(|m| m.len()).unwrap_or(0);
        assert_eq!(len, 0, "{name}");
    }
}

#[test]
fn stages_run_separately_match_run() {
    let staged = tempfile::tempdir().unwrap();
    let set = store_flag(staged.path());
    for sub in ["stage1", "stage2", "stage3"] {
        assert_eq!(plrh(&[sub, "--config", &conf(), "--set", &set]).status.code(), Some(0), "{sub}");
    }
    let whole = tempfile::tempdir().unwrap();
    assert_eq!(plrh(&["run", "--config", &conf(), "--set", &store_flag(whole.path())]).status.code(), Some(0));
    assert_eq!(
        fs::read(staged.path().join("predictions.jsonl")).unwrap(),
        fs::read(whole.path().join("predictions.jsonl")).unwrap()
    );
}

#[test]
fn evaluate_prints_one_decimal_percentage() {
    let dir = fixtures().join("metric");
    let o = plrh(&[
        "evaluate",
        "--predictions",
        dir.join("six.predictions.jsonl").to_str().unwrap(),
        "--dataset",
        dir.join("six.samples.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "66.7\n");
}

#[test]
fn compare_prints_a_row_per_run() {
    let dir = fixtures().join("metric");
    let samples = dir.join("span.samples.jsonl");
    let preds = dir.join("span.predictions.jsonl");
    let a = format!("full={}", preds.display());
    let b = format!("again={}", preds.display());
    let o = plrh(&["compare", "--dataset", samples.to_str().unwrap(), &a, &b, "--csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "variant,accuracy_pct,delta_pct");
    assert_eq!(rows.len(), 3);
    assert!(rows[2].ends_with(",+0.0"));
}

#[test]
fn select_debug_lists_ranked_examples() {
    let o = plrh(&["select-debug", "--config", &conf(), "--sample", "test-12", "--json-lines"]);
    assert_eq!(o.status.code(), Some(0));
    let lines = json_lines(&o);
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().enumerate().all(|(i, v)| v["rank"] == i + 1 && v["query_id"] == "test-12"));
}

#[test]
fn usage_and_configuration_errors_exit_2() {
    let o = plrh(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    assert_eq!(plrh(&["run", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(plrh(&["run", "--config", "/nonexistent/run.conf"]).status.code(), Some(2));
    assert_eq!(plrh(&["run"]).status.code(), Some(2));
    let c = conf();
    assert_eq!(plrh(&["run", "--config", &c, "--set", "colour=red"]).status.code(), Some(2));
    assert_eq!(
        plrh(&["run", "--config", &c, "--set", "n_examples=2", "--set", "n_examples=3"]).status.code(),
        Some(2)
    );
    assert_eq!(plrh(&["run", "--config", &c, "--set", "n_examples=0"]).status.code(), Some(2));
}

#[test]
fn validate_reports_violations() {
    let e2e = fixtures().join("e2e");
    let ok = plrh(&["validate", "--config", &conf()]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("12 train, 8 test"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"train-00\",\"split\":\"train\",\"caption\":\"\",\"question\":\"q\",\"answers\":[]}\n").unwrap();
    let o = plrh(&[
        "validate",
        "--dataset",
        bad.to_str().unwrap(),
        "--features",
        e2e.join("features.jsonl").to_str().unwrap(),
        "--json-lines",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let lines = json_lines(&o);
    assert_eq!(lines.iter().filter(|v| v["event"] == "violation").count(), 2);
}

#[test]
fn per_sample_failures_exit_1_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = fs::read_to_string(fixtures().join("e2e/scripted.jsonl")).unwrap();
    // drop the stage-2 rationale of one test sample
    let victim = fixture.lines().position(|l| l.contains("points to wool.")).unwrap();
    let kept: Vec<&str> = fixture.lines().enumerate().filter(|(i, _)| *i != victim).map(|(_, l)| l).collect();
    let partial = dir.path().join("partial.jsonl");
    fs::write(&partial, kept.join("\n") + "\n").unwrap();
    let store = dir.path().join("store");
    let o = plrh(&[
        "run",
        "--config",
        &conf(),
        "--set",
        &store_flag(&store),
        "--set",
        &format!("backend.fixture={}", partial.display()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let report = store.join("failures.jsonl");
    assert!(stdout(&o).contains(&report.display().to_string()));
    let failures = fs::read_to_string(report).unwrap();
    let lines: Vec<&str> = failures.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("stage2_rationale") && lines[0].contains("no scripted completion"));
    assert!(lines[1].contains("stage3_answer") && lines[1].contains("test-19"));
}

#[test]
fn killed_run_resumes_from_durable_records() {
    let fast = Arc::new(AtomicBool::new(false));
    let flag = fast.clone();
    let server = TestServer::start(move |_, _| {
        let delay = if flag.load(Ordering::SeqCst) { 0 } else { 150 };
        (200, completion_body(" A rationale.\n\n"), Duration::from_millis(delay))
    });
    let dir = tempfile::tempdir().unwrap();
    let args = |store: &Path| {
        vec![
            "stage1".to_owned(),
            "--config".into(),
            conf(),
            "--set".into(),
            store_flag(store),
            "--set".into(),
            "backend=http".into(),
            "--set".into(),
            format!("backend.url={}", server.url),
            "--set".into(),
            "concurrency=1".into(),
        ]
    };
    let mut child = Command::new(env!("CARGO_BIN_EXE_plrh")).args(args(dir.path())).spawn().unwrap();
    let started = Instant::now();
    while server.requests().len() < 5 && started.elapsed() < Duration::from_secs(20) {
        std::thread::sleep(Duration::from_millis(10));
    }
    child.kill().unwrap();
    child.wait().unwrap();

    let durable = Store::open(dir.path()).unwrap();
    let kept = durable.len();
    assert!((3..12).contains(&kept), "kept {kept}");
    assert_eq!(durable.corrupt_lines(), 0);
    drop(durable);

    fast.store(true, Ordering::SeqCst);
    let before = server.requests().len();
    let o = Command::new(env!("CARGO_BIN_EXE_plrh")).args(args(dir.path())).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(server.requests().len() - before, 12 - kept);
    assert_eq!(Store::open(dir.path()).unwrap().len(), 12);
}
