//! Implementation of each CLI verb.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use modagent_core::agent::AgentMode;
use modagent_core::eval::{
    load_eval_corpus, render_summary, render_tool_stats, run_ablation, run_eval, EvalOptions,
};
use modagent_core::feedback::FeedbackStore;
use modagent_core::guidelines::{ingest_guidelines, load_guideline_dir, GuidelineIndex};
use modagent_core::index::{ingest_corpus, read_corpus, PostIndex};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, ServiceConfig};
use crate::runtime::{
    build_annotator, build_embedder, build_runtime, corpus_err, open_index, open_service_indexes,
    IndexAccess, RuntimeError,
};
use crate::service::{router, AppState, DecisionRing, DECISION_RING_CAPACITY};

/// Failure of a verb, printed as one JSON line.
#[derive(Debug, Error)]
#[error("{code}: {detail}")]
pub struct CliError {
    pub code: &'static str,
    pub detail: String,
}

impl CliError {
    pub fn new(code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": self.code, "detail": self.detail})
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

pub fn ingest_posts(config: &ServiceConfig, corpus: &Path) -> Result<Value, CliError> {
    let records = read_corpus(corpus).map_err(|e| io(corpus, e))?;
    let mut index: PostIndex = open_index(
        &config.paths.posts_index,
        config.dimension,
        IndexAccess::Create,
    )?;
    let embedder = build_embedder(config);
    let report = ingest_corpus(&mut index, embedder.as_ref(), records);
    let failures: Vec<Value> = report
        .failures
        .iter()
        .map(|f| json!({"line": f.line, "error": f.kind.to_string()}))
        .collect();
    Ok(json!({
        "ingested": report.ingested,
        "failed": failures.len(),
        "total": index.len(),
        "index": config.paths.posts_index,
        "failures": failures,
    }))
}

pub fn ingest_guideline_dir(
    config: &ServiceConfig,
    dir: &Path,
    max_chunk_chars: usize,
) -> Result<Value, CliError> {
    let docs = load_guideline_dir(dir).map_err(|e| CliError::new("io", e.to_string()))?;
    if docs.is_empty() {
        return Err(CliError::new(
            "no_documents",
            format!(
                "{} holds none of reddit.md, x.md, meta.md, unesco.md, un.md",
                dir.display()
            ),
        ));
    }
    let mut index: GuidelineIndex = open_index(
        &config.paths.guidelines_index,
        config.dimension,
        IndexAccess::Create,
    )?;
    let annotator = build_annotator(config);
    let embedder = build_embedder(config);
    let report = ingest_guidelines(
        &mut index,
        annotator.as_ref(),
        embedder.as_ref(),
        &docs,
        max_chunk_chars,
    );
    let failures: Vec<Value> = report
        .failures
        .iter()
        .map(|f| json!({"chunk_id": f.chunk_id, "error": f.error.to_string()}))
        .collect();
    Ok(json!({
        "indexed": report.indexed,
        "documents": docs.len(),
        "failed": failures.len(),
        "total": index.len(),
        "index": config.paths.guidelines_index,
        "failures": failures,
    }))
}

pub struct EvalArgs {
    pub corpus: PathBuf,
    pub mode: Option<AgentMode>,
    pub ablate: bool,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
}

/// Output of an `eval` or `ablate` run.
pub struct EvalOutput {
    pub table: String,
    pub out_dir: PathBuf,
}

pub fn evaluate(mut config: ServiceConfig, args: &EvalArgs) -> Result<EvalOutput, CliError> {
    if let Some(mode) = args.mode {
        config.agent.mode = mode;
    }
    if let Some(seed) = args.seed {
        match config.stub.as_mut() {
            Some(stub) => stub.settings.seed = seed,
            None => tracing::warn!("--seed only affects stub endpoints"),
        }
    }
    let corpus =
        load_eval_corpus(&args.corpus).map_err(|e| CliError::from(corpus_err(&args.corpus, e)))?;
    let posts: PostIndex = open_index(
        &config.paths.posts_index,
        config.dimension,
        IndexAccess::ReadIfPresent,
    )?;
    let guidelines: GuidelineIndex = open_index(
        &config.paths.guidelines_index,
        config.dimension,
        IndexAccess::ReadIfPresent,
    )?;
    let runtime = build_runtime(
        &config,
        posts.into_shared(),
        guidelines.into_shared(),
        &corpus,
    )?;
    if config.stub.is_none() {
        let down: Vec<String> = runtime
            .dependencies
            .iter()
            .filter(|d| !(d.name == "planner" && config.agent.mode == AgentMode::Fallback))
            .filter(|d| !d.dependency.probe())
            .map(|d| format!("{} ({})", d.name, d.url))
            .collect();
        if !down.is_empty() {
            return Err(CliError::new("endpoint_unreachable", down.join(", ")));
        }
    }
    let out_dir = args.out.clone().unwrap_or_else(default_out_dir);
    let options = EvalOptions {
        workers: args.workers,
        out_dir: Some(out_dir.clone()),
    };
    let eval_err = |e: modagent_core::eval::EvalError| CliError::new("eval_failed", e.to_string());
    let table = if args.ablate {
        let rows =
            run_ablation(&runtime.agent, &corpus, &config.agent, &options).map_err(eval_err)?;
        let table: Vec<_> = rows
            .iter()
            .map(|r| (r.config_name.as_str(), &r.result, r.errors))
            .collect();
        render_summary(&table)
    } else {
        let report =
            run_eval(&runtime.agent, &corpus, &config.agent, &options).map_err(eval_err)?;
        let mode = match config.agent.mode {
            AgentMode::Planner => "planner",
            AgentMode::Fallback => "fallback",
        };
        format!(
            "{}\n{}",
            render_summary(&[(mode, &report.result, report.errors)]),
            render_tool_stats(&report.stats)
        )
    };
    Ok(EvalOutput { table, out_dir })
}

fn default_out_dir() -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("run-{secs}"))
}

/// Builds the shared service state. Both index files must exist.
pub fn service_state(config: &ServiceConfig) -> Result<AppState, CliError> {
    let (posts, guidelines) = open_service_indexes(config)?;
    let runtime = build_runtime(config, posts.clone(), guidelines.clone(), &[])?;
    let feedback = FeedbackStore::open(
        posts,
        runtime.agent.toolbox.embedder.clone(),
        runtime.agent.clock.clone(),
        &config.paths.feedback_log,
    )
    .map_err(|e| CliError::new("feedback_log_invalid", e.to_string()))?;
    let mode = match config.agent.mode {
        AgentMode::Planner => "planner",
        AgentMode::Fallback => "fallback",
    };
    Ok(AppState {
        agent: runtime.agent,
        config: config.agent.clone(),
        mode_label: if config.stub.is_some() {
            format!("{mode} (stub)")
        } else {
            mode.to_string()
        },
        request_timeout: config.request_timeout(),
        feedback,
        guidelines,
        dependencies: runtime.dependencies,
        decisions: Mutex::new(DecisionRing::new(DECISION_RING_CAPACITY)),
    })
}

pub async fn serve(config: ServiceConfig) -> Result<(), CliError> {
    let state = Arc::new(service_state(&config)?);
    let app = router(state, &config.cors_origins);
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|e| CliError::new("io", format!("cannot bind {}: {e}", config.listen)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::new("io", e.to_string()))?;
    tracing::info!(%addr, "listening");
    println!("{}", json!({"listening": addr.to_string()}));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::new("io", e.to_string()))
}
