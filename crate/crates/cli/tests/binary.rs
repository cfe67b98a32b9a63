mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fixtures, small_guideline_dir, write_stub_config};
use serde_json::Value;

fn modagent(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modagent"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MODAGENT_CONFIG")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

#[test]
fn ingest_posts_prints_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_stub_config(dir.path(), "planner");
    let corpus = fixtures().join("posts.tsv");
    let out = modagent(
        &[
            "ingest-posts",
            "--corpus",
            corpus.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    let v = stdout_json(&out);
    assert_eq!(v["ingested"], 200);
    assert_eq!(v["failed"], 0);
    assert!(dir.path().join("posts.idx").exists());
}

#[test]
fn ingest_guidelines_prints_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_stub_config(dir.path(), "planner");
    let gdir = small_guideline_dir(dir.path());
    let out = modagent(
        &[
            "ingest-guidelines",
            "--dir",
            gdir.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    let v = stdout_json(&out);
    assert_eq!(v["indexed"], 7);
    assert_eq!(v["documents"], 2);
}

#[test]
fn eval_fallback_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_stub_config(dir.path(), "planner");
    let corpus = fixtures().join("eval20.tsv");
    let run = dir.path().join("run");
    let out = modagent(
        &[
            "eval",
            "--mode",
            "fallback",
            "--corpus",
            corpus.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--seed",
            "11",
            "--workers",
            "2",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("F1_MACRO"), "{stdout}");
    for f in [
        "config.json",
        "decisions.jsonl",
        "metrics.json",
        "stats.json",
        "summary.txt",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"], 20);
    let config: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["mode"], "fallback");
    assert_eq!(
        std::fs::read_to_string(run.join("decisions.jsonl"))
            .unwrap()
            .lines()
            .count(),
        20
    );
}

#[test]
fn ablate_prints_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_stub_config(dir.path(), "fallback");
    let corpus = fixtures().join("eval20.tsv");
    let run = dir.path().join("ablation");
    let out = modagent(
        &[
            "ablate",
            "--corpus",
            corpus.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = std::fs::read_to_string(run.join("summary.txt")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 7, "{summary}");
    for name in [
        "all tools",
        "no tools",
        "w/o classifier",
        "w/o similar posts",
        "w/o slang dictionary",
        "w/o reasoning",
    ] {
        assert!(lines.iter().any(|l| l.starts_with(name)), "{name} missing");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("w/o reasoning"));
}

#[test]
fn missing_config_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = modagent(
        &[
            "ingest-posts",
            "--corpus",
            "x.tsv",
            "--config",
            "absent.json",
        ],
        dir.path(),
    );
    let v = stderr_json(&out);
    assert_eq!(v["error"], "config_not_found");
    assert!(v["detail"].as_str().unwrap().contains("absent.json"));
}

#[test]
fn serve_fails_fast_naming_missing_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_stub_config(dir.path(), "planner");
    let out = modagent(
        &[
            "serve",
            "--config",
            cfg.to_str().unwrap(),
            "--listen",
            "127.0.0.1:0",
        ],
        dir.path(),
    );
    let v = stderr_json(&out);
    assert_eq!(v["error"], "index_missing");
    assert!(v["detail"].as_str().unwrap().contains("posts.idx"));
}

#[test]
fn corrupt_index_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_stub_config(dir.path(), "planner");
    std::fs::write(dir.path().join("posts.idx"), b"garbage").unwrap();
    let corpus = fixtures().join("posts.tsv");
    let out = modagent(
        &[
            "ingest-posts",
            "--corpus",
            corpus.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(stderr_json(&out)["error"], "index_corrupt");
}

#[test]
fn live_eval_without_endpoints_is_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("live.json");
    let dead = "http://127.0.0.1:9";
    std::fs::write(
        &cfg,
        serde_json::json!({
            "endpoints": {"classifier": dead, "embedding": dead, "reasoning": dead, "planner": dead, "dictionary": dead},
            "timeouts": {"classifier_secs": 1, "embedding_secs": 1, "dictionary_secs": 1, "reasoning_secs": 1, "planner_secs": 1}
        })
        .to_string(),
    )
    .unwrap();
    let corpus = fixtures().join("eval20.tsv");
    let out = modagent(
        &[
            "eval",
            "--corpus",
            corpus.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    let v = stderr_json(&out);
    assert_eq!(v["error"], "endpoint_unreachable");
    assert!(v["detail"].as_str().unwrap().contains("classifier"));
}
