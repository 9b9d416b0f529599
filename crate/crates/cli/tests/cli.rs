use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_focuschain"));
    c.env_remove("RUST_LOG");
    c
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/kitchen")
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs every stage separately and returns the shard bytes.
fn staged_pipeline(dir: &Path) -> Vec<u8> {
    let script = fixture().join("script.json");
    let images = fixture().join("images");
    let (script, images) = (script.to_str().unwrap(), images.to_str().unwrap());
    ok(
        &[
            "--script",
            script,
            "extract",
            "--images",
            images,
            "--out",
            "profiles.jsonl",
        ],
        dir,
    );
    ok(
        &[
            "--script",
            script,
            "connect",
            "--profiles",
            "profiles.jsonl",
            "--out",
            "pairs.jsonl",
            "--seed",
            "3",
        ],
        dir,
    );
    ok(
        &[
            "--script",
            script,
            "annotate",
            "--pairs",
            "pairs.jsonl",
            "--profiles",
            "profiles.jsonl",
            "--images",
            images,
            "--out",
            "graph.json",
        ],
        dir,
    );
    let summary = ok(
        &[
            "--script",
            script,
            "--json",
            "synthesize",
            "--graph",
            "graph.json",
            "--count",
            "2",
            "--seed",
            "7",
            "--path-length",
            "3",
            "--out",
            "out.visc.jsonl",
        ],
        dir,
    );
    let summary: Value = serde_json::from_str(summary.trim()).unwrap();
    assert!(summary["records"].as_u64().unwrap() >= 3, "{summary}");
    std::fs::read(dir.join("out.visc.jsonl")).unwrap()
}

#[test]
fn staged_pipeline_is_deterministic_and_valid() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let shard = staged_pipeline(a.path());
    assert_eq!(shard, staged_pipeline(b.path()));

    let graph: Value = serde_json::from_slice(&std::fs::read(a.path().join("graph.json")).unwrap()).unwrap();
    assert_eq!(graph["nodes"].as_array().unwrap().len(), 6);
    assert_eq!(graph["edges"].as_array().unwrap().len(), 7);

    let v = ok(&["--json", "validate", "--in", "out.visc.jsonl"], a.path());
    let v: Value = serde_json::from_str(v.trim()).unwrap();
    assert_eq!(v["invalid"], 0);

    let stats: Value = serde_json::from_str(&ok(&["stats", "--in", "out.visc.jsonl"], a.path())).unwrap();
    assert_eq!(stats["record_count"], v["valid"]);
    assert_eq!(stats["path_length_histogram"]["3"], v["valid"]);

    ok(&["export", "--in", "out.visc.jsonl", "--out", "conv.jsonl"], a.path());
    let conv = std::fs::read_to_string(a.path().join("conv.jsonl")).unwrap();
    let first: Value = serde_json::from_str(conv.lines().next().unwrap()).unwrap();
    assert_eq!(first["conversations"][0]["from"], "human");
    assert!(first["conversations"][1]["value"]
        .as_str()
        .unwrap()
        .contains("Final answer: "));
}

#[test]
fn run_command_writes_graph_and_shard() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture().join("script.json");
    let images = fixture().join("images");
    let out = ok(
        &[
            "--script",
            script.to_str().unwrap(),
            "--json",
            "run",
            "--images",
            images.to_str().unwrap(),
            "--out",
            "all.visc.jsonl",
            "--count",
            "2",
            "--path-length",
            "3",
            "--graph-out",
            "g.json",
        ],
        dir.path(),
    );
    let summary: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["profiles"], 6);
    assert_eq!(summary["edges"], 7);
    assert!(dir.path().join("g.json").exists());
    assert!(summary["records"].as_u64().unwrap() >= 3);
}

fn small_shard(dir: &Path) -> PathBuf {
    let script = fixture().join("script.json");
    let images = fixture().join("images");
    ok(
        &[
            "--script",
            script.to_str().unwrap(),
            "run",
            "--images",
            images.to_str().unwrap(),
            "--out",
            "s.visc.jsonl",
            "--count",
            "2",
            "--path-length",
            "3",
        ],
        dir,
    );
    dir.join("s.visc.jsonl")
}

#[test]
fn stats_sample_and_validate_failure() {
    let dir = tempfile::tempdir().unwrap();
    small_shard(dir.path());
    ok(
        &[
            "sample",
            "--in",
            "s.visc.jsonl",
            "--n",
            "4",
            "--seed",
            "1",
            "--out",
            "four.visc.jsonl",
        ],
        dir.path(),
    );
    let stats: Value = serde_json::from_str(&ok(&["stats", "--in", "four.visc.jsonl"], dir.path())).unwrap();
    assert_eq!(stats["record_count"], 4);

    let mut text = std::fs::read_to_string(dir.path().join("four.visc.jsonl")).unwrap();
    text.push_str("{\"id\": \"broken\"}\n");
    std::fs::write(dir.path().join("bad.visc.jsonl"), text).unwrap();
    let out = run(&["--json", "validate", "--in", "bad.visc.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["valid"], 4);
    assert_eq!(summary["invalid"], 1);
    assert_eq!(summary["errors"][0]["line"], 5);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["stats", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["sample", "--in", "x"], dir.path()).status.code(), Some(2));
}

#[test]
fn stage_errors_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["stats", "--in", "missing.visc.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("missing.visc.jsonl"));
    assert!(err["causes"].as_array().unwrap().len() >= 2);

    std::fs::write(dir.path().join("empty.json"), "{}").unwrap();
    let images = fixture().join("images");
    let out = run(
        &[
            "--script",
            "empty.json",
            "extract",
            "--images",
            images.to_str().unwrap(),
            "--out",
            "p.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("stage extract"), "{err}");

    std::fs::write(dir.path().join("cfg.json"), r#"{"parallelism": 0}"#).unwrap();
    let out = run(
        &["--config", "cfg.json", "extract", "--images", ".", "--out", "p.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("parallelism"));
}

#[test]
fn chain_command_prints_trace() {
    let dir = tempfile::tempdir().unwrap();
    let script = json!({
        "chain_plan": [r#"{"sub_question": "What is in the bowl?", "focus": [0]}"#],
        "chain_answer": ["flour"],
        "chain_stop": [r#"{"stop": true, "final_answer": "a cake"}"#],
    });
    std::fs::write(dir.path().join("chain.json"), script.to_string()).unwrap();
    let images = fixture().join("images");
    let out = ok(
        &[
            "--script",
            "chain.json",
            "chain",
            "--question",
            "What is being made?",
            "--images",
            "01_flour.png,06_cake.png",
            "--image-root",
            images.to_str().unwrap(),
            "--trace-out",
            "t.jsonl",
        ],
        dir.path(),
    );
    let trace: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(trace["final_answer"], "a cake");
    assert_eq!(trace["steps"][0]["focus"], json!([0]));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("t.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

fn http(port: u16, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let body = body.map(Value::to_string).unwrap_or_default();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw[9..12].parse().unwrap();
    let (head, payload) = raw.split_once("\r\n\r\n").unwrap();
    let payload = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(payload)
    } else {
        payload.to_string()
    };
    (status, serde_json::from_str(&payload).unwrap_or(Value::Null))
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    while let Some((size, rest)) = s.split_once("\r\n") {
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            break;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
    out
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn review_serve_and_report() {
    let dir = tempfile::tempdir().unwrap();
    small_shard(dir.path());
    let images = fixture().join("images");
    let port = free_port();
    let set = [
        "--dataset",
        "s.visc.jsonl",
        "--sample",
        "3",
        "--seed",
        "5",
        "--judgments",
        "j.jsonl",
    ];
    let mut args = vec!["review", "serve"];
    args.extend(set);
    let port_s = port.to_string();
    args.extend(["--images", images.to_str().unwrap(), "--port", &port_s]);
    let _server = Server(
        bin()
            .args(&args)
            .current_dir(dir.path())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(20);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }

    let (status, progress) = http(port, "GET", "/api/progress", None);
    assert_eq!(status, 200);
    assert_eq!(progress["total"], 3);

    for annotator in ["ann1", "ann2", "ann3"] {
        loop {
            let (status, item) = http(port, "GET", &format!("/api/items?annotator={annotator}"), None);
            assert_eq!(status, 200);
            if item["done"] == true {
                break;
            }
            let id = item["record"]["id"].as_str().unwrap().to_string();
            let url = item["image_urls"][0].as_str().unwrap().to_string();
            let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
            write!(s, "GET {url} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            let mut raw = Vec::new();
            s.read_to_end(&mut raw).unwrap();
            assert!(raw.starts_with(b"HTTP/1.1 200"));
            let ok = !(annotator == "ann3" && item["position"] == 1);
            let body = json!({"annotator": annotator, "final_answer_ok": ok, "sub_answers_ok": true, "focus_ok": true});
            let (status, _) = http(port, "POST", &format!("/api/items/{id}/judgment"), Some(&body));
            assert_eq!(status, 200);
        }
    }
    let (_, report) = http(port, "GET", "/api/agreement", None);
    assert_eq!(report["n_items"], 3);
    assert_eq!(report["valid_items"], 3);
    assert_eq!(report["validity_rate"], 1.0);

    let mut args = vec!["review", "report"];
    args.extend(set);
    let offline: Value = serde_json::from_str(&ok(&args, dir.path())).unwrap();
    assert_eq!(offline, report);
}
