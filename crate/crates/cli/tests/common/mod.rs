#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use modagent_cli::commands::{ingest_guideline_dir, ingest_posts, service_state};
use modagent_cli::service::{router, AppState};
use modagent_cli::ServiceConfig;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub const DIM: usize = 256;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Stub config in a fresh directory; indexes live next to it.
pub fn write_stub_config(dir: &Path, mode: &str) -> PathBuf {
    let cfg = json!({
        "dimension": DIM,
        "paths": {
            "posts_index": "posts.idx",
            "guidelines_index": "guidelines.idx",
            "feedback_log": "feedback.jsonl"
        },
        "agent": {"mode": mode},
        "stub": {
            "seed": 7,
            "classifier_accuracy": 1.0,
            "reasoner_accuracy": 1.0,
            "planner_accuracy": 1.0,
            "gold_corpus": fixtures().join("posts.tsv")
        }
    });
    let path = dir.join("stub.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Copies the reddit and x guideline documents (7 sections in total).
pub fn small_guideline_dir(dir: &Path) -> PathBuf {
    let out = dir.join("guidelines");
    std::fs::create_dir_all(&out).unwrap();
    for name in ["reddit.md", "reddit.meta", "x.md", "x.meta"] {
        std::fs::copy(fixtures().join("guidelines").join(name), out.join(name)).unwrap();
    }
    out
}

pub struct Harness {
    pub dir: TempDir,
    pub config: ServiceConfig,
    pub state: Arc<AppState>,
}

impl Harness {
    /// Seeded posts index and a 7-chunk guideline index.
    pub fn new(mode: &str) -> Self {
        Self::with(mode, true)
    }

    pub fn with(mode: &str, guidelines: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_stub_config(dir.path(), mode);
        let config = ServiceConfig::load_with_env(Some(&cfg_path), |_| None).unwrap();
        let out = ingest_posts(&config, &fixtures().join("posts.tsv")).unwrap();
        assert_eq!(out["ingested"], 200);
        if guidelines {
            let gdir = small_guideline_dir(dir.path());
            let out = ingest_guideline_dir(&config, &gdir, 1500).unwrap();
            assert_eq!(out["indexed"], 7);
        } else {
            let empty: modagent_core::guidelines::GuidelineIndex =
                modagent_core::index::VectorIndex::new(DIM);
            empty.save(&config.paths.guidelines_index).unwrap();
        }
        let state = Arc::new(service_state(&config).unwrap());
        Self { dir, config, state }
    }

    pub fn from_state(dir: TempDir, config: ServiceConfig, state: AppState) -> Self {
        Self {
            dir,
            config,
            state: Arc::new(state),
        }
    }

    pub fn app(&self) -> Router {
        router(self.state.clone(), &self.config.cors_origins)
    }

    pub async fn send(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let body = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes)
                .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, body)
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.post_raw(uri, body.to_string()).await
    }

    pub async fn post_raw(&self, uri: &str, body: String) -> (StatusCode, Value) {
        let req = Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(body))
            .unwrap();
        self.send(req).await
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send(Request::get(uri).body(Body::empty()).unwrap())
            .await
    }
}

/// First text labelled hate in the seed corpus.
pub fn seed_text(hate: bool) -> String {
    let raw = std::fs::read_to_string(fixtures().join("posts.tsv")).unwrap();
    raw.lines()
        .map(|l| l.splitn(3, '\t').collect::<Vec<_>>())
        .find(|f| (f[1] == "1") == hate)
        .map(|f| f[2].to_string())
        .unwrap()
}
