use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn data(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(path)
}

fn mondrian() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mondrian"));
    for var in ["MONDRIAN_ALPHA", "MONDRIAN_OBJECTIVE", "MONDRIAN_OPS", "RUST_LOG"] {
        cmd.env_remove(var);
    }
    cmd
}

fn run(cmd: &mut Command) -> (i32, Value, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    let stderr = String::from_utf8(stderr).unwrap();
    let json = serde_json::from_slice(&stdout).unwrap_or(Value::Null);
    (status.code().unwrap(), json, stderr)
}

#[test]
fn tokenize_counts() {
    let (code, out, _) = run(mondrian().args(["tokenize", "--vocab"]).arg(data("mini.ranks")).arg(""));
    assert_eq!(code, 0);
    assert_eq!(out, serde_json::json!({"tokens": 0}));
    let (code, out, _) = run(mondrian().args(["tokenize", "--ids", "hello world"]));
    assert_eq!(code, 0);
    assert_eq!(out["tokens"], 2);
    assert_eq!(out["ids"], serde_json::json!([15339, 1917]));
}

#[test]
fn tokenize_reads_stdin() {
    let mut child = mondrian()
        .args(["tokenize", "--vocab"])
        .arg(data("mini.ranks"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"abab\n").unwrap();
    let out = child.wait_with_output().unwrap();
    let json: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["tokens"], 2);
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, stderr) = run(mondrian().arg("frobnicate"));
    assert_eq!(code, 1);
    assert!(stderr.contains("Usage"), "{stderr}");
    let (code, _, _) = run(mondrian().args(["abstract", "--alpha", "1.5", "x"]));
    assert_eq!(code, 1);
    let (code, _, _) = run(mondrian().args(["abstract", "--ops", "shrink", "x"]));
    assert_eq!(code, 1);
    let (code, _, _) = run(mondrian().arg("--help"));
    assert_eq!(code, 0);
}

#[test]
fn runtime_errors_exit_two() {
    let (code, _, stderr) = run(mondrian().args(["tokenize", "--vocab", "/nonexistent.tiktoken", "x"]));
    assert_eq!(code, 2);
    assert!(stderr.starts_with("error:"), "{stderr}");
    let (code, _, _) = run(mondrian().args(["report", "--ledger", "/nonexistent/ledger.jsonl"]));
    assert_eq!(code, 2);
}

#[test]
fn abstract_shortens_with_delete() {
    let (code, out, _) = run(mondrian().args([
        "abstract",
        "--ops",
        "delete",
        "--provider",
        "always-one",
        "aa bb cc dd",
    ]));
    assert_eq!(code, 0);
    assert_eq!(out["abstracted"], "dd");
    assert_eq!(out["trace"].as_array().unwrap().len(), 3);
}

#[test]
fn unreachable_remote_passes_through() {
    let text = "Tell me a story about a brave dog.";
    let (code, out, stderr) = run(mondrian().args([
        "abstract",
        "--ops",
        "delete",
        "--endpoint",
        "http://127.0.0.1:9",
        text,
    ]));
    assert_eq!(code, 0);
    assert_eq!(out["abstracted"], text);
    assert_eq!(out["passed_through"], true);
    assert!(out["warning"].is_string());
    assert!(stderr.contains("WARN"), "{stderr}");
}

#[test]
fn bad_environment_value_is_overridden_by_flag() {
    let (code, _, stderr) = run(mondrian().env("MONDRIAN_OBJECTIVE", "syllables").args(["abstract", "a b"]));
    assert_eq!(code, 1);
    assert!(stderr.contains("syllables"), "{stderr}");
    let (code, _, _) = run(
        mondrian()
            .env("MONDRIAN_OBJECTIVE", "syllables")
            .args(["abstract", "--objective", "char", "--ops", "delete", "a b"]),
    );
    assert_eq!(code, 0);
}

#[test]
fn config_values_reach_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("mondrian.json");
    std::fs::write(
        &config,
        r#"{"abstraction": {"ops": ["delete"], "provider": {"kind": "always_one"}}}"#,
    )
    .unwrap();
    let (code, out, _) = run(mondrian().args(["abstract", "--config"]).arg(&config).arg("aa bb cc"));
    assert_eq!(code, 0);
    assert_eq!(out["abstracted"], "cc");
    // Environment overrides the file.
    let (code, out, _) = run(
        mondrian()
            .args(["abstract", "--config"])
            .arg(&config)
            .env("MONDRIAN_OPS", "transform")
            .arg("aa bb cc"),
    );
    assert_eq!(code, 0);
    assert_eq!(out["abstracted"], "aa bb cc");
    // And flags override the environment.
    let (code, out, _) = run(
        mondrian()
            .args(["abstract", "--config"])
            .arg(&config)
            .env("MONDRIAN_OPS", "transform")
            .args(["--ops", "delete", "aa bb cc"]),
    );
    assert_eq!(code, 0);
    assert_eq!(out["abstracted"], "cc");
    std::fs::write(&config, r#"{"abstraction": {"speed": 3}}"#).unwrap();
    let (code, _, _) = run(mondrian().args(["abstract", "--config"]).arg(&config).arg("x"));
    assert_eq!(code, 2);
}

#[test]
fn eval_and_ablate_with_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let (code, agg, stderr) = run(mondrian()
        .args(["eval", "--ops", "delete", "--provider", "exact", "--upstream", "echo", "--corpus"])
        .arg(data("corpus/instructions.jsonl"))
        .args(["--limit", "10", "--out"])
        .arg(&out));
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(agg["samples"], 10);
    assert_eq!(agg["mean_agreement"], 100.0);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 10);

    let csv = dir.path().join("table.csv");
    let (code, table, stderr) = run(mondrian()
        .args(["ablate", "--axis", "alpha", "--ops", "delete", "--upstream", "echo", "--corpus"])
        .arg(data("corpus/instructions.jsonl"))
        .args(["--limit", "10", "--csv"])
        .arg(&csv));
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn serve_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.jsonl");
    let mut child = mondrian()
        .args(["serve", "--ops", "delete", "--provider", "always-one", "--listen", "127.0.0.1:0", "--ledger"])
        .arg(&ledger)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut banner = String::new();
    while !banner.contains('}') {
        stdout.read_line(&mut banner).unwrap();
    }
    let addr = serde_json::from_str::<Value>(&banner).unwrap()["listening"].as_str().unwrap().to_string();

    let body = r#"{"model":"m","messages":[{"role":"user","content":"one two three four"}]}"#;
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "POST /v1/chat/completions HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"content\":\"four\""), "{response}");

    let (code, report, _) = run(mondrian().arg("report").arg("--ledger").arg(&ledger));
    assert_eq!(code, 0);
    assert_eq!(report["records"], 1);
    assert_eq!(report["total_original_units"], 4);
    assert_eq!(report["total_abstracted_units"], 1);
}
