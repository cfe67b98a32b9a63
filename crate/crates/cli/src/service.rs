//! JSON HTTP API over the agent, the feedback store and the guideline index.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use modagent_core::agent::{Agent, AgentConfig, AgentError};
use modagent_core::domain::{AgentDecision, GuidelineCitation, Platform, Post};
use modagent_core::feedback::{FeedbackError, FeedbackStore, Verdict};
use modagent_core::guidelines::{
    retrieve_guidelines, ChunkPayload, GuidelineError, DEFAULT_CITATIONS,
};
use modagent_core::index::SharedIndex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::runtime::DependencyInfo;

/// Decisions kept for feedback correlation.
pub const DECISION_RING_CAPACITY: usize = 10_000;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "detail": self.detail})),
        )
            .into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        let detail = e.to_string();
        if e.is_timeout() {
            return ApiError::new(StatusCode::GATEWAY_TIMEOUT, "timeout", detail);
        }
        match e {
            AgentError::InvalidPost(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "empty_text", detail)
            }
            AgentError::ToolFailed { .. } | AgentError::PlannerUnavailable(_) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "upstream_failure", detail)
            }
            AgentError::RetriesExhausted { .. } => {
                ApiError::new(StatusCode::BAD_GATEWAY, "planner_invalid_output", detail)
            }
            AgentError::ToolBudgetExceeded { .. } => {
                ApiError::new(StatusCode::BAD_GATEWAY, "tool_budget_exceeded", detail)
            }
            AgentError::NoEvidence => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "no_evidence", detail)
            }
            AgentError::InvalidConfig(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "config_invalid", detail)
            }
        }
    }
}

impl From<FeedbackError> for ApiError {
    fn from(e: FeedbackError) -> Self {
        let detail = e.to_string();
        match e {
            FeedbackError::EmptyText => {
                ApiError::new(StatusCode::BAD_REQUEST, "empty_text", detail)
            }
            FeedbackError::DuplicateFeedback(_) => {
                ApiError::new(StatusCode::CONFLICT, "duplicate_feedback", detail)
            }
            FeedbackError::Embed(_) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "upstream_failure", detail)
            }
            FeedbackError::IndexWriteFailure(_)
            | FeedbackError::Log { .. }
            | FeedbackError::Interrupted => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "index_write_failure",
                detail,
            ),
        }
    }
}

/// Bounded map of recent decisions; the oldest is evicted first.
pub struct DecisionRing {
    capacity: usize,
    order: VecDeque<String>,
    entries: HashMap<String, AgentDecision>,
}

impl DecisionRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            order: VecDeque::new(),
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: String, decision: AgentDecision) {
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
        self.order.push_back(id.clone());
        self.entries.insert(id, decision);
    }

    pub fn get(&self, id: &str) -> Option<&AgentDecision> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub struct AppState {
    pub agent: Agent,
    pub config: AgentConfig,
    pub mode_label: String,
    pub request_timeout: Duration,
    pub feedback: FeedbackStore,
    pub guidelines: SharedIndex<ChunkPayload>,
    pub dependencies: Vec<DependencyInfo>,
    pub decisions: Mutex<DecisionRing>,
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/api/classify", post(classify))
        .route("/api/feedback", post(feedback))
        .route("/api/guidelines/search", get(search_guidelines))
        .route("/api/health", get(health))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(cors(cors_origins))
        .with_state(state)
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        return layer.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    layer.allow_origin(AllowOrigin::list(list))
}

/// Runs blocking work off the async runtime, bounded by `timeout`.
async fn blocking<T, F>(timeout: Duration, f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> T + Send + 'static,
    T: Send + 'static,
{
    match tokio::time::timeout(timeout, tokio::task::spawn_blocking(f)).await {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(ApiError::internal(format!("worker failed: {e}"))),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "timeout",
            format!("request exceeded {:.1}s", timeout.as_secs_f64()),
        )),
    }
}

#[derive(Debug, Deserialize)]
pub struct ClassifyRequest {
    pub text: String,
    #[serde(default)]
    pub platform: Option<Platform>,
}

#[derive(Debug, Serialize)]
pub struct ClassifyResponse {
    pub decision_id: String,
    #[serde(flatten)]
    pub decision: AgentDecision,
}

async fn classify(
    State(state): State<SharedState>,
    body: Result<Json<ClassifyRequest>, JsonRejection>,
) -> Result<Json<ClassifyResponse>, ApiError> {
    let Json(req) = body?;
    let decision_id = uuid::Uuid::new_v4().to_string();
    let mut post = Post::new(decision_id.clone(), req.text)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "empty_text", e.to_string()))?;
    post.platform = req.platform;
    let worker = state.clone();
    let decision = blocking(state.request_timeout, move || {
        worker.agent.run(&post, &worker.config)
    })
    .await??;
    tracing::info!(decision_id, label = decision.label.as_str(), "classified");
    state
        .decisions
        .lock()
        .expect("decision ring lock poisoned")
        .insert(decision_id.clone(), decision.clone());
    Ok(Json(ClassifyResponse {
        decision_id,
        decision,
    }))
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub decision_id: String,
    pub post_text: String,
    pub verdict: String,
}

async fn feedback(
    State(state): State<SharedState>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let verdict: Verdict = req
        .verdict
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_verdict", e))?;
    let decision = state
        .decisions
        .lock()
        .expect("decision ring lock poisoned")
        .get(&req.decision_id)
        .cloned()
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_decision",
                format!("no decision {:?} in this service instance", req.decision_id),
            )
        })?;
    let worker = state.clone();
    let record = blocking(state.request_timeout, move || {
        worker
            .feedback
            .apply_feedback(&decision, &req.post_text, verdict)
    })
    .await??;
    tracing::info!(feedback_id = record.feedback_id, "feedback recorded");
    Ok(Json(record).into_response())
}

#[derive(Debug, Deserialize)]
pub struct SearchQuery {
    #[serde(default)]
    pub q: String,
    pub k: Option<usize>,
}

async fn search_guidelines(
    State(state): State<SharedState>,
    query: Result<Query<SearchQuery>, QueryRejection>,
) -> Result<Json<Vec<GuidelineCitation>>, ApiError> {
    let Query(query) = query?;
    if query.q.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "empty_query",
            "q must not be empty",
        ));
    }
    let k = query.k.unwrap_or(DEFAULT_CITATIONS);
    if k == 0 {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_k",
            "k must be at least 1",
        ));
    }
    let worker = state.clone();
    let result = blocking(state.request_timeout, move || {
        retrieve_guidelines(
            &worker.guidelines,
            worker.agent.toolbox.embedder.as_ref(),
            &query.q,
            k,
        )
    })
    .await?;
    match result {
        Ok(citations) => Ok(Json(citations)),
        Err(GuidelineError::EmptyIndex) => Ok(Json(Vec::new())),
        Err(e @ (GuidelineError::Endpoint(_) | GuidelineError::Embed(_))) => Err(ApiError::new(
            StatusCode::BAD_GATEWAY,
            "upstream_failure",
            format!("embedding: {e}"),
        )),
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}

async fn health(State(state): State<SharedState>) -> Json<Value> {
    let posts = state
        .agent
        .toolbox
        .posts
        .read()
        .map(|i| i.len())
        .unwrap_or(0);
    let guidelines = state.guidelines.read().map(|i| i.len()).unwrap_or(0);
    let deps = state.dependencies.clone();
    let probes = tokio::task::spawn_blocking(move || {
        deps.iter()
            .map(|d| {
                (
                    d.name.to_string(),
                    json!({"url": d.url, "reachable": d.dependency.probe()}),
                )
            })
            .collect::<serde_json::Map<String, Value>>()
    });
    let endpoints = match tokio::time::timeout(state.request_timeout, probes).await {
        Ok(Ok(map)) => Value::Object(map),
        _ => Value::Object(
            state
                .dependencies
                .iter()
                .map(|d| {
                    (
                        d.name.to_string(),
                        json!({"url": d.url, "reachable": false}),
                    )
                })
                .collect(),
        ),
    };
    let decisions = state.decisions.lock().map(|r| r.len()).unwrap_or(0);
    Json(json!({
        "status": "ok",
        "mode": state.mode_label,
        "indexes": {
            "posts": posts,
            "guidelines": guidelines,
            "feedback": state.feedback.len(),
        },
        "decisions_cached": decisions,
        "endpoints": endpoints,
    }))
}
