//! Clients for the external model endpoints.
//!
//! Each endpoint is a small trait so the agent can run against HTTP
//! services in production and against in-process stubs in tests. The wire
//! shapes implemented by the `Http*` clients are:
//!
//! | endpoint   | request                               | response                                   |
//! |------------|---------------------------------------|--------------------------------------------|
//! | embedding  | `POST /embed {"texts": [..]}`         | `{"vectors": [[f32, ..], ..]}`             |
//! | classifier | `POST /classify {"text": ..}`         | `{"label": "hate"\|"not_hate", "probability": f}` |
//! | dictionary | `GET define?term=<urlencoded>`        | `{"list": [{"definition", "example", "thumbs_up", "thumbs_down"}]}` |
//! | reasoning  | `POST /generate {"prompt": ..}`       | `{"text": ..}`                             |
//! | planner    | `POST /agent {"prompt": ..}`          | `{"text": ..}`                             |

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const DEFAULT_EMBED_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_CLASSIFIER_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_DICTIONARY_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_REASONING_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_PLANNER_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EndpointError {
    #[error("endpoint {url} unavailable{}: {detail}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Unavailable {
        url: String,
        status: Option<u16>,
        detail: String,
    },
    #[error("endpoint {url} timed out")]
    Timeout { url: String },
    #[error("malformed response from {url}: {detail}")]
    Malformed { url: String, detail: String },
}

impl EndpointError {
    pub fn unavailable(url: impl Into<String>, detail: impl Into<String>) -> Self {
        EndpointError::Unavailable {
            url: url.into(),
            status: None,
            detail: detail.into(),
        }
    }

    pub fn malformed(url: impl Into<String>, detail: impl Into<String>) -> Self {
        EndpointError::Malformed {
            url: url.into(),
            detail: detail.into(),
        }
    }
}

/// Embedding model endpoint. Returns raw (unnormalized) vectors.
pub trait Embedder: Send + Sync {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EndpointError>;

    fn probe(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResponse {
    #[serde(default)]
    pub label: Option<String>,
    pub probability: f64,
}

/// Binary hate speech classifier endpoint.
pub trait ClassifierEndpoint: Send + Sync {
    fn classify(&self, text: &str) -> Result<ClassifierResponse, EndpointError>;

    fn probe(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub example: Option<String>,
    #[serde(default)]
    pub thumbs_up: i64,
    #[serde(default)]
    pub thumbs_down: i64,
}

/// Crowd-sourced slang dictionary endpoint.
pub trait DictionaryEndpoint: Send + Sync {
    fn define(&self, term: &str) -> Result<Vec<DictionaryEntry>, EndpointError>;

    fn probe(&self) -> bool {
        true
    }
}

/// Prompt-in, text-out model endpoint (reasoning model, annotation model,
/// agent planner).
pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, EndpointError>;

    fn probe(&self) -> bool {
        true
    }
}

/// Shared plumbing for the JSON-over-HTTP clients.
#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url, path.trim_start_matches('/'))
    }

    fn map_err(url: &str, err: ureq::Error) -> EndpointError {
        match err {
            ureq::Error::Timeout(_) => EndpointError::Timeout {
                url: url.to_string(),
            },
            ureq::Error::Json(e) => EndpointError::malformed(url, e.to_string()),
            ureq::Error::StatusCode(code) => EndpointError::Unavailable {
                url: url.to_string(),
                status: Some(code),
                detail: "http error".into(),
            },
            other => EndpointError::unavailable(url, other.to_string()),
        }
    }

    fn read<T: DeserializeOwned>(
        url: &str,
        resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, EndpointError> {
        let mut resp = resp.map_err(|e| Self::map_err(url, e))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let detail = resp
                .body_mut()
                .read_to_string()
                .unwrap_or_default()
                .chars()
                .take(200)
                .collect();
            return Err(EndpointError::Unavailable {
                url: url.to_string(),
                status: Some(status),
                detail,
            });
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Self::map_err(url, e))?;
        serde_json::from_str(&text).map_err(|e| EndpointError::malformed(url, e.to_string()))
    }

    pub fn post_json<T: DeserializeOwned>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, EndpointError> {
        let url = self.url(path);
        Self::read(&url, self.agent.post(&url).send_json(body))
    }

    pub fn get_json<T: DeserializeOwned>(
        &self,
        path: &str,
        query: &[(&str, &str)],
    ) -> Result<T, EndpointError> {
        let url = self.url(path);
        let mut req = self.agent.get(&url);
        for (k, v) in query {
            req = req.query(*k, *v);
        }
        Self::read(&url, req.call())
    }

    /// Any HTTP response, even an error status, counts as reachable.
    pub fn probe(&self) -> bool {
        let probe: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(2)))
            .http_status_as_error(false)
            .build()
            .into();
        probe.get(&self.base_url).call().is_ok()
    }
}

pub struct HttpEmbedder(pub HttpEndpoint);

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self(HttpEndpoint::new(base_url, timeout))
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EndpointError> {
        let resp: EmbedResponse = self.0.post_json("embed", &json!({ "texts": texts }))?;
        if resp.vectors.len() != texts.len() {
            return Err(EndpointError::malformed(
                self.0.url("embed"),
                format!(
                    "asked for {} vectors, got {}",
                    texts.len(),
                    resp.vectors.len()
                ),
            ));
        }
        Ok(resp.vectors)
    }

    fn probe(&self) -> bool {
        self.0.probe()
    }
}

pub struct HttpClassifier(pub HttpEndpoint);

impl HttpClassifier {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self(HttpEndpoint::new(base_url, timeout))
    }
}

impl ClassifierEndpoint for HttpClassifier {
    fn classify(&self, text: &str) -> Result<ClassifierResponse, EndpointError> {
        self.0.post_json("classify", &json!({ "text": text }))
    }

    fn probe(&self) -> bool {
        self.0.probe()
    }
}

pub struct HttpDictionary(pub HttpEndpoint);

impl HttpDictionary {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self(HttpEndpoint::new(base_url, timeout))
    }
}

#[derive(Deserialize)]
struct DictionaryResponse {
    list: Vec<DictionaryEntry>,
}

impl DictionaryEndpoint for HttpDictionary {
    fn define(&self, term: &str) -> Result<Vec<DictionaryEntry>, EndpointError> {
        let resp: DictionaryResponse = self.0.get_json("define", &[("term", term)])?;
        Ok(resp.list)
    }

    fn probe(&self) -> bool {
        self.0.probe()
    }
}

/// `POST <path> {"prompt": ..} -> {"text": ..}`; `/generate` for the
/// reasoning and annotation models, `/agent` for the planner.
pub struct HttpGenerator {
    endpoint: HttpEndpoint,
    path: String,
}

impl HttpGenerator {
    pub fn new(base_url: impl Into<String>, path: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: HttpEndpoint::new(base_url, timeout),
            path: path.into(),
        }
    }

    pub fn reasoning(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self::new(base_url, "generate", timeout)
    }

    pub fn planner(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self::new(base_url, "agent", timeout)
    }
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, prompt: &str) -> Result<String, EndpointError> {
        let resp: GenerateResponse = self
            .endpoint
            .post_json(&self.path, &json!({ "prompt": prompt }))?;
        Ok(resp.text)
    }

    fn probe(&self) -> bool {
        self.endpoint.probe()
    }
}
