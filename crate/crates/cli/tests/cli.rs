use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn eraser(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eraser"))
        .args(args)
        .env_remove("LISTEN_ADDR")
        .env_remove("UPSTREAM_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eraser(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let out = eraser(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
}

#[test]
fn stage_failure_emits_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = eraser(&["train-deployed", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8_lossy(&out.stderr);
    let body: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(body["error"], "io");
    assert!(!body["message"].as_str().unwrap().is_empty());
}

#[test]
fn full_pipeline_reduces_bias() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let common = ["--out", out_dir, "--seed", "1"];
    let run = |stage: &[&str]| ok(&[stage, &common[..]].concat());

    run(&["gen-data"]);
    let sidecar = read_json(&dir.path().join("data.json"));
    assert_eq!(sidecar["seed"], 1);
    run(&["train-deployed"]);
    run(&["distill", "--bias-attr", "bias"]);
    let table = run(&["evaluate"]);
    for col in ["Average ACC", "Worst ACC", "Model Bias"] {
        assert!(table.contains(col), "{table}");
    }
    let report = read_json(&dir.path().join("report_evaluate.json"));
    let before = report["before"]["equalodds"]["bias"].as_f64().unwrap();
    let after = report["after"]["equalodds"]["bias"].as_f64().unwrap();
    assert!(after < before, "{before} -> {after}");
    assert_eq!(report["seed"], 1);
    assert!(report["inputs"]["test"]["sha256"].as_str().unwrap().len() == 64);

    run(&["evaluate", "--no-patches"]);
    let report = read_json(&dir.path().join("report_evaluate.json"));
    assert_eq!(report["before"], report["after"]);

    let test_csv = dir.path().join("test.csv");
    let erased = run(&["erase", "--input", test_csv.to_str().unwrap(), "--bias-attr", "bias"]);
    let summary: serde_json::Value = serde_json::from_str(&erased).unwrap();
    assert_eq!(summary["rows"], 2000);
    assert!(summary["argmax_changed"].as_u64().unwrap() > 0);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"seed": 5, "data": {"n": 800, "alpha": 0.2}, "eval_per_cell": 10}"#,
    )
    .unwrap();
    let out = ok(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "6",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["seed"], 6);
    assert_eq!(report["spec"]["alpha"], 0.2);
    assert_eq!(report["sizes"]["train"], 800);
    assert_eq!(report["sizes"]["test"], 40);
}

#[test]
fn serve_oracle_only_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    ok(&["gen-data", "--out", out_dir, "--n", "800"]);
    ok(&["train-deployed", "--out", out_dir, "--epochs", "1"]);

    let mut child = Command::new(env!("CARGO_BIN_EXE_eraser"))
        .args(["serve", "--oracle-only", "--listen", "127.0.0.1:0", "--out", out_dir])
        .env_remove("LISTEN_ADDR")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url: serde_json::Value = serde_json::from_str(&line).unwrap();
    let addr = url["listening"]
        .as_str()
        .unwrap()
        .trim_start_matches("http://")
        .to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains(r#""k":2"#), "{response}");
}
