use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = forge(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn digest_line(stdout: &str) -> String {
    stdout
        .lines()
        .find(|l| l.starts_with("manifest digest:"))
        .unwrap()
        .to_string()
}

fn synth(dir: &Path) -> String {
    ok(&["synth", "--out", dir.to_str().unwrap(), "--seed", "42"]);
    dir.join("forge.toml").to_str().unwrap().to_string()
}

#[test]
fn run_stats_resume_assemble_merge() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let run_dir = dir.path().join("run");
    let run = run_dir.to_str().unwrap();

    let first = ok(&["run", "--config", &config]);
    assert!(first.contains("| Stage | Unit | Input | Output | Discarded | Notes |"));
    let resumed = ok(&["resume", run]);
    assert_eq!(digest_line(&first), digest_line(&resumed));
    let assembled = ok(&["assemble", "--run", run]);
    assert_eq!(digest_line(&first), digest_line(&assembled));

    let stats = ok(&["stats", run]);
    assert!(stats.contains("cinematic.policy"));
    let records = ok(&["stats", run, "--format", "records"]);
    assert_eq!(records.lines().count(), 12);

    let dataset = std::fs::read_to_string(run_dir.join("dataset.jsonl")).unwrap();
    let external = dir.path().join("external.jsonl");
    let relabeled = dataset.replace("\"pair_id\":\"", "\"pair_id\":\"ext-");
    std::fs::write(&external, relabeled).unwrap();
    let merged = ok(&[
        "merge",
        "--run",
        run,
        "--external",
        external.to_str().unwrap(),
        "--limit",
        "10",
    ]);
    assert!(merged.contains("external: 10"), "{merged}");
}

#[test]
fn separate_flows_then_assemble() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let cin = ok(&["cinematic", "--config", &config]);
    assert!(!cin.contains("noncinematic."));
    let both = ok(&["noncinematic", "--config", &config]);
    assert!(both.contains("noncinematic.policy"));
    let full = ok(&["assemble", "--run", dir.path().join("run").to_str().unwrap()]);

    let other = tempfile::tempdir().unwrap();
    let config = synth(other.path());
    let together = ok(&["run", "--config", &config]);
    assert_eq!(digest_line(&full), digest_line(&together));
}

#[test]
fn abort_exits_nonzero_with_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let mut text = std::fs::read_to_string(&config).unwrap();
    // a live judge with no endpoint never answers
    text = text.replacen(
        "id = \"pairwise-1\"\nkind = \"pairwise\"\nbackend = \"mock\"",
        "id = \"pairwise-1\"\nkind = \"pairwise\"\nbackend = \"http\"",
        1,
    );
    assert!(text.contains("backend = \"http\""), "config layout changed:\n{text}");
    std::fs::write(&config, text).unwrap();
    let out = forge(&["cinematic", "--config", &config]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("aborted at stage cinematic.ensemble"), "{stderr}");
}

#[test]
fn bench_reports_in_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("pairwise.jsonl");
    std::fs::write(
        &cases,
        concat!(
            "{\"model\":\"m\",\"pair_id\":\"1\",\"ground_truth\":\"yes\",\"original\":\"yes\",\"swapped\":\"no\"}\n",
            "{\"model\":\"m\",\"pair_id\":\"2\",\"ground_truth\":\"no\",\"original\":\"yes\",\"swapped\":\"yes\"}\n",
        ),
    )
    .unwrap();
    let table = ok(&["bench", "pairwise", "--cases", cases.to_str().unwrap()]);
    assert!(table.starts_with("| Model | Yes | No | Avg |"), "{table}");
    let csv = ok(&[
        "bench",
        "pairwise",
        "--cases",
        cases.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(csv.lines().count() >= 2);

    let scores = dir.path().join("poster.jsonl");
    std::fs::write(
        &scores,
        "{\"model\":\"m\",\"prompt_id\":\"p\",\"scores\":[1,2,3,4,5,6,7,8]}\n",
    )
    .unwrap();
    let out_file = dir.path().join("poster.txt");
    ok(&[
        "bench",
        "poster",
        "--scores",
        scores.to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
    ]);
    let table = std::fs::read_to_string(out_file).unwrap();
    assert!(table.contains("| Model | Mean | Median | Std-Avg | Bo8-Avg |"));
    assert!(table.contains("| m | 4.50 | 4.50 | 2.29 | 8.00 |"), "{table}");

    let points = dir.path().join("pointwise.jsonl");
    std::fs::write(
        &points,
        "{\"pair_id\":\"a\",\"score_chosen\":1.0,\"score_rejected\":1.0}\n",
    )
    .unwrap();
    let records = ok(&[
        "bench",
        "pointwise",
        "--cases",
        points.to_str().unwrap(),
        "--format",
        "records",
    ]);
    assert!(records.contains("50"), "{records}");

    let bad = forge(&[
        "bench",
        "pointwise",
        "--cases",
        points.to_str().unwrap(),
        "--format",
        "xml",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn audit_serves_a_sampled_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    ok(&["run", "--config", &config]);
    let dataset = dir.path().join("run/dataset.jsonl");
    let mut child = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args([
            "audit",
            "serve",
            "--dataset",
            dataset.to_str().unwrap(),
            "--n",
            "12",
            "--seed",
            "1",
            "--port",
            "0",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .split("http://")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "GET /api/tasks/next?annotator=ann1 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"task_id\":\"t0001\""));
    assert!(dir.path().join("run/audit/tasks.jsonl").exists());

    let report = ok(&[
        "audit",
        "report",
        "--store",
        dir.path().join("run/audit").to_str().unwrap(),
    ]);
    assert!(report.starts_with("| Method | N | Corr. (%) | Err. (%) | Controv. (%) |"));
}

#[test]
fn missing_run_directory_is_an_error() {
    let out = forge(&["stats", "/nonexistent/run"]);
    assert_eq!(out.status.code(), Some(1));
}
