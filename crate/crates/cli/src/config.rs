//! Service configuration: one JSON file, overridable by `MODAGENT_*`
//! environment variables. Precedence is env, then file, then defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use axum::http::Uri;
use modagent_core::agent::{AgentConfig, AgentMode};
use modagent_core::endpoints;
use modagent_core::index::DEFAULT_DIMENSION;
use modagent_core::stubs::StubSettings;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(PathBuf),
    #[error("config file {path}: {detail}")]
    Unreadable { path: PathBuf, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::NotFound(_) => "config_not_found",
            ConfigError::Unreadable { .. } | ConfigError::Invalid(_) => "config_invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointUrls {
    pub classifier: String,
    pub embedding: String,
    pub reasoning: String,
    pub planner: String,
    pub dictionary: String,
    /// Model that titles and summarizes guideline chunks; the reasoning
    /// endpoint when unset.
    pub annotation: Option<String>,
}

impl Default for EndpointUrls {
    fn default() -> Self {
        Self {
            classifier: "http://127.0.0.1:8001".into(),
            embedding: "http://127.0.0.1:8002".into(),
            reasoning: "http://127.0.0.1:8003".into(),
            planner: "http://127.0.0.1:8004".into(),
            dictionary: "http://127.0.0.1:8005".into(),
            annotation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timeouts {
    pub classifier_secs: f64,
    pub embedding_secs: f64,
    pub dictionary_secs: f64,
    pub reasoning_secs: f64,
    pub planner_secs: f64,
}

impl Default for Timeouts {
    fn default() -> Self {
        let s = |d: Duration| d.as_secs_f64();
        Self {
            classifier_secs: s(endpoints::DEFAULT_CLASSIFIER_TIMEOUT),
            embedding_secs: s(endpoints::DEFAULT_EMBED_TIMEOUT),
            dictionary_secs: s(endpoints::DEFAULT_DICTIONARY_TIMEOUT),
            reasoning_secs: s(endpoints::DEFAULT_REASONING_TIMEOUT),
            planner_secs: s(endpoints::DEFAULT_PLANNER_TIMEOUT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub posts_index: PathBuf,
    pub guidelines_index: PathBuf,
    pub feedback_log: PathBuf,
    /// Common-word list for slang candidate extraction; built-in when unset.
    pub wordlist: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            posts_index: "data/posts.idx".into(),
            guidelines_index: "data/guidelines.idx".into(),
            feedback_log: "data/feedback.jsonl".into(),
            wordlist: None,
        }
    }
}

/// Replaces every endpoint with an in-process stub. `gold_corpus` gives
/// the oracles their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StubConfig {
    #[serde(flatten)]
    pub settings: StubSettings,
    pub gold_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen: String,
    pub endpoints: EndpointUrls,
    pub timeouts: Timeouts,
    pub request_timeout_secs: f64,
    pub paths: Paths,
    pub dimension: usize,
    pub agent: AgentConfig,
    pub cors_origins: Vec<String>,
    pub stub: Option<StubConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            endpoints: EndpointUrls::default(),
            timeouts: Timeouts::default(),
            request_timeout_secs: 300.0,
            paths: Paths::default(),
            dimension: DEFAULT_DIMENSION,
            agent: AgentConfig::default(),
            cors_origins: vec!["http://localhost:5173".into()],
            stub: None,
        }
    }
}

fn parse_secs(name: &str, raw: &str) -> Result<f64, ConfigError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s > 0.0)
        .ok_or_else(|| {
            ConfigError::Invalid(format!(
                "{name}={raw:?} is not a positive number of seconds"
            ))
        })
}

impl ServiceConfig {
    /// Reads `path` (defaults when `None`), applies the process
    /// environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with_env(path, |k| std::env::var(k).ok())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let mut config = match path {
            None => Self::default(),
            Some(p) if !p.exists() => return Err(ConfigError::NotFound(p.to_path_buf())),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Unreadable {
                    path: p.to_path_buf(),
                    detail: e.to_string(),
                })?;
                let mut config: Self =
                    serde_json::from_str(&text).map_err(|e| ConfigError::Unreadable {
                        path: p.to_path_buf(),
                        detail: e.to_string(),
                    })?;
                // Relative paths in the file are relative to the file.
                if let Some(base) = p.parent() {
                    config.rebase(base);
                }
                config
            }
        };
        config.apply_env(env)?;
        config.agent.planner_endpoint = config.endpoints.planner.clone();
        config.validate()?;
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.posts_index);
        fix(&mut self.paths.guidelines_index);
        fix(&mut self.paths.feedback_log);
        if let Some(w) = self.paths.wordlist.as_mut() {
            fix(w);
        }
        if let Some(g) = self.stub.as_mut().and_then(|s| s.gold_corpus.as_mut()) {
            fix(g);
        }
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let set = |target: &mut String, key: &str| {
            if let Some(v) = env(key) {
                *target = v;
            }
        };
        set(&mut self.listen, "MODAGENT_LISTEN");
        set(&mut self.endpoints.classifier, "MODAGENT_CLASSIFIER_URL");
        set(&mut self.endpoints.embedding, "MODAGENT_EMBEDDING_URL");
        set(&mut self.endpoints.reasoning, "MODAGENT_REASONING_URL");
        set(&mut self.endpoints.planner, "MODAGENT_PLANNER_URL");
        set(&mut self.endpoints.dictionary, "MODAGENT_DICTIONARY_URL");
        if let Some(v) = env("MODAGENT_ANNOTATION_URL") {
            self.endpoints.annotation = Some(v);
        }
        for (key, target) in [
            ("MODAGENT_POSTS_INDEX", &mut self.paths.posts_index),
            (
                "MODAGENT_GUIDELINES_INDEX",
                &mut self.paths.guidelines_index,
            ),
            ("MODAGENT_FEEDBACK_LOG", &mut self.paths.feedback_log),
        ] {
            if let Some(v) = env(key) {
                *target = PathBuf::from(v);
            }
        }
        if let Some(v) = env("MODAGENT_MODE") {
            self.agent.mode = v.parse::<AgentMode>().map_err(ConfigError::Invalid)?;
        }
        if let Some(v) = env("MODAGENT_REQUEST_TIMEOUT_SECS") {
            self.request_timeout_secs = parse_secs("MODAGENT_REQUEST_TIMEOUT_SECS", &v)?;
        }
        if let Some(v) = env("MODAGENT_CORS_ORIGINS") {
            self.cors_origins = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.agent
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.dimension == 0 {
            return Err(ConfigError::Invalid("dimension must be positive".into()));
        }
        if self.listen.parse::<std::net::SocketAddr>().is_err() {
            return Err(ConfigError::Invalid(format!(
                "listen address {:?} is not host:port",
                self.listen
            )));
        }
        let e = &self.endpoints;
        let mut urls = vec![
            ("classifier", &e.classifier),
            ("embedding", &e.embedding),
            ("reasoning", &e.reasoning),
            ("planner", &e.planner),
            ("dictionary", &e.dictionary),
        ];
        if let Some(a) = &e.annotation {
            urls.push(("annotation", a));
        }
        for (name, url) in urls {
            check_url(name, url)?;
        }
        let t = &self.timeouts;
        for (name, secs) in [
            ("classifier_secs", t.classifier_secs),
            ("embedding_secs", t.embedding_secs),
            ("dictionary_secs", t.dictionary_secs),
            ("reasoning_secs", t.reasoning_secs),
            ("planner_secs", t.planner_secs),
            ("request_timeout_secs", self.request_timeout_secs),
        ] {
            if !(secs.is_finite() && secs > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }
}

fn check_url(name: &str, url: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Invalid(format!("{name} endpoint {url:?} is not an http(s) URL"));
    let uri: Uri = url.parse().map_err(|_| bad())?;
    match (uri.scheme_str(), uri.authority()) {
        (Some("http" | "https"), Some(_)) => Ok(()),
        _ => Err(bad()),
    }
}
