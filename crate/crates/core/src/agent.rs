//! The agent loop: a planner model picks tools, reads their observations
//! and finalizes a structured decision. A deterministic fallback pipeline
//! runs the same tools in a fixed order when no planner is wanted.
//!
//! # Planner exchange
//!
//! The planner receives [`render_planner_prompt`]'s output and answers with
//! tagged lines, either a tool call
//!
//! ```text
//! ACTION: call_tool
//! TOOL: similar_posts
//! ARGS: {"k": 5}
//! ```
//!
//! or a final answer (the JSON may span several lines):
//!
//! ```text
//! ACTION: finalize
//! FINAL: {"label": "hate", "confidence": 0.91, "explanation": "..."}
//! ```
//!
//! Tool arguments (all optional):
//!
//! | tool               | ARGS keys                                                   |
//! |--------------------|-------------------------------------------------------------|
//! | `classifier`       | `text`                                                      |
//! | `similar_posts`    | `text`, `k`                                                 |
//! | `slang_dictionary` | `term` or `terms` (defaults to unknown words of the post)   |
//! | `reasoning`        | `instruction`, `include_classifier`, `include_definitions`  |
//! | `guidelines`       | `query`, `k`                                                |
//!
//! A call to a disabled tool is answered with a `rejected` observation. An
//! unparseable action or a final answer that fails validation counts as one
//! retry and the validation errors are shown to the planner; tools are not
//! re-run and identical tool calls are served from a per-run cache.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::domain::{
    validate_decision, AgentDecision, Confidence, DomainError, GuidelineCitation, Label, Post,
    ToolKind, MAX_RETRIES,
};
use crate::endpoints::{EndpointError, TextGenerator};
use crate::guidelines::DEFAULT_CITATIONS;
use crate::index::{SimilarPost, DEFAULT_TOP_K};
use crate::tools::{
    extract_candidate_terms, ClassifierVerdict, ReasoningInput, ReasoningOutput, SlangDefinition,
    ToolError, Toolbox, MAX_REASONING_EVIDENCE,
};
use crate::trace::{Clock, TraceRecorder};

pub const DEFAULT_MAX_TOOL_CALLS: usize = 12;

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a content moderation agent that decides whether a social media post is hate speech: \
offensive, derogatory, humiliating or insulting discourse that promotes violence, discrimination or hostility \
towards people because of attributes such as race, religion, ethnicity or gender. \
Gather evidence with the available tools before deciding. Use the classifier for a fast first opinion, \
similar posts for labelled precedents, the slang dictionary for unfamiliar or informal words, \
and the reasoning model for a careful judgement. Do not treat dialect or slang as hateful by itself. \
Finish with a binary label, a confidence between 0 and 1, and a short explanation.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    Planner,
    Fallback,
}

impl std::str::FromStr for AgentMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "planner" => Ok(AgentMode::Planner),
            "fallback" => Ok(AgentMode::Fallback),
            other => Err(format!(
                "unknown mode {other:?} (expected planner or fallback)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub enabled_tools: BTreeSet<ToolKind>,
    pub max_retries: u32,
    pub planner_endpoint: String,
    pub system_prompt: String,
    pub max_tool_calls_per_run: usize,
    pub mode: AgentMode,
    /// Neighbours fetched by the similar-posts tool.
    pub similar_k: usize,
    /// Guideline citations attached to each decision.
    pub citations_k: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            enabled_tools: ToolKind::ALL.into_iter().collect(),
            max_retries: MAX_RETRIES,
            planner_endpoint: "http://127.0.0.1:8004".into(),
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            max_tool_calls_per_run: DEFAULT_MAX_TOOL_CALLS,
            mode: AgentMode::Planner,
            similar_k: DEFAULT_TOP_K,
            citations_k: DEFAULT_CITATIONS,
        }
    }
}

impl AgentConfig {
    pub fn with_mode(mut self, mode: AgentMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_tools(mut self, tools: impl IntoIterator<Item = ToolKind>) -> Self {
        self.enabled_tools = tools.into_iter().collect();
        self
    }

    pub fn without(mut self, tool: ToolKind) -> Self {
        self.enabled_tools.remove(&tool);
        self
    }

    pub fn is_enabled(&self, tool: ToolKind) -> bool {
        self.enabled_tools.contains(&tool)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_retries > MAX_RETRIES {
            return Err(AgentError::InvalidConfig(format!(
                "max_retries {} exceeds {MAX_RETRIES}",
                self.max_retries
            )));
        }
        if self.max_tool_calls_per_run == 0 {
            return Err(AgentError::InvalidConfig(
                "max_tool_calls_per_run must be positive".into(),
            ));
        }
        if self.similar_k == 0 {
            return Err(AgentError::InvalidConfig(
                "similar_k must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("planner produced no valid decision after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("planner unavailable: {0}")]
    PlannerUnavailable(EndpointError),
    #[error("tool budget of {budget} calls exceeded")]
    ToolBudgetExceeded { budget: usize },
    #[error("no evidence: every label-producing tool is disabled")]
    NoEvidence,
    #[error("tool {tool} failed: {error}")]
    ToolFailed { tool: ToolKind, error: ToolError },
    #[error("invalid post: {0}")]
    InvalidPost(DomainError),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
}

impl AgentError {
    /// The upstream tool or endpoint responsible, if any.
    pub fn failed_tool(&self) -> Option<ToolKind> {
        match self {
            AgentError::ToolFailed { tool, .. } => Some(*tool),
            _ => None,
        }
    }

    pub fn is_timeout(&self) -> bool {
        match self {
            AgentError::ToolFailed { error, .. } => error.is_timeout(),
            AgentError::PlannerUnavailable(EndpointError::Timeout { .. }) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerActionKind {
    CallTool,
    Finalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerAction {
    pub kind: PlannerActionKind,
    pub tool: Option<ToolKind>,
    pub arguments: Map<String, Value>,
    pub final_decision: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unparseable planner action: {0}")]
pub struct ActionParseError(pub String);

fn tag_value<'a>(line: &'a str, tag: &str) -> Option<&'a str> {
    let t = line.trim_start();
    (t.len() >= tag.len() && t[..tag.len()].eq_ignore_ascii_case(tag))
        .then(|| t[tag.len()..].trim())
}

/// Parses the planner's tagged response into an action.
pub fn parse_planner_action(text: &str) -> Result<PlannerAction, ActionParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let action = lines
        .iter()
        .find_map(|l| tag_value(l, "ACTION:"))
        .ok_or_else(|| ActionParseError("missing ACTION line".into()))?;
    match action.to_ascii_lowercase().as_str() {
        "call_tool" => {
            let name = lines
                .iter()
                .find_map(|l| tag_value(l, "TOOL:"))
                .ok_or_else(|| ActionParseError("call_tool without TOOL line".into()))?;
            let tool: ToolKind = name
                .parse()
                .map_err(|_| ActionParseError(format!("unknown tool {name:?}")))?;
            let arguments = match lines.iter().find_map(|l| tag_value(l, "ARGS:")) {
                None | Some("") => Map::new(),
                Some(raw) => match serde_json::from_str::<Value>(raw) {
                    Ok(Value::Object(m)) => m,
                    Ok(Value::Null) => Map::new(),
                    Ok(_) => return Err(ActionParseError("ARGS must be a JSON object".into())),
                    Err(e) => return Err(ActionParseError(format!("ARGS is not JSON: {e}"))),
                },
            };
            Ok(PlannerAction {
                kind: PlannerActionKind::CallTool,
                tool: Some(tool),
                arguments,
                final_decision: None,
            })
        }
        "finalize" => {
            let at = lines
                .iter()
                .position(|l| tag_value(l, "FINAL:").is_some())
                .ok_or_else(|| ActionParseError("finalize without FINAL".into()))?;
            let mut raw = tag_value(lines[at], "FINAL:")
                .unwrap_or_default()
                .to_string();
            for l in &lines[at + 1..] {
                raw.push('\n');
                raw.push_str(l);
            }
            let value: Value = serde_json::from_str(raw.trim())
                .map_err(|e| ActionParseError(format!("FINAL is not JSON: {e}")))?;
            Ok(PlannerAction {
                kind: PlannerActionKind::Finalize,
                tool: None,
                arguments: Map::new(),
                final_decision: Some(value),
            })
        }
        other => Err(ActionParseError(format!("unknown ACTION {other:?}"))),
    }
}

/// Where an observation shown to the planner came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationSource {
    Tool(ToolKind),
    Rejected,
    InvalidOutput,
}

impl ObservationSource {
    fn label(self) -> &'static str {
        match self {
            ObservationSource::Tool(t) => t.as_str(),
            ObservationSource::Rejected => "rejected",
            ObservationSource::InvalidOutput => "invalid_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub source: ObservationSource,
    pub body: String,
}

fn tool_description(tool: ToolKind) -> &'static str {
    match tool {
        ToolKind::Classifier => "fine-tuned binary hate speech classifier; returns label and probability of hate. ARGS: {\"text\"?}",
        ToolKind::SimilarPosts => "retrieves the most similar labelled posts with similarity scores and hate flags. ARGS: {\"text\"?, \"k\"?}",
        ToolKind::SlangDictionary => "looks up slang definitions from a crowd-sourced dictionary. ARGS: {\"term\"? | \"terms\"?}",
        ToolKind::Reasoning => "asks a hate speech reasoning model for a judgement over the evidence gathered so far. ARGS: {\"instruction\"?, \"include_classifier\"?, \"include_definitions\"?}",
        ToolKind::Guidelines => "retrieves platform hate speech policy snippets. ARGS: {\"query\"?, \"k\"?}",
    }
}

/// Deterministic planner prompt: system prompt, roster of enabled tools,
/// response format, the post, then observations in invocation order.
pub fn render_planner_prompt(
    post: &Post,
    evidence: &[Observation],
    config: &AgentConfig,
) -> String {
    let mut p = String::new();
    p.push_str(config.system_prompt.trim());
    p.push_str("\n\n## Tools\n");
    for tool in ToolKind::ALL.into_iter().filter(|t| config.is_enabled(*t)) {
        let _ = writeln!(p, "- {tool}: {}", tool_description(tool));
    }
    if config.enabled_tools.is_empty() {
        p.push_str("(no tools available; answer directly)\n");
    }
    p.push_str(
        "\n## Response format\n\
         To call a tool:\nACTION: call_tool\nTOOL: <tool name>\nARGS: <json object>\n\
         To answer:\nACTION: finalize\nFINAL: {\"label\": \"hate\" | \"not_hate\", \"confidence\": <0..1>, \"explanation\": \"<why>\"}\n",
    );
    p.push_str("\n## Post\n<<<\n");
    p.push_str(&post.text);
    p.push_str("\n>>>\n");
    if !evidence.is_empty() {
        p.push_str("\n## Evidence\n");
        for (i, obs) in evidence.iter().enumerate() {
            let _ = writeln!(
                p,
                "### [{}] {}\n{}",
                i + 1,
                obs.source.label(),
                obs.body.trim_end()
            );
        }
    }
    p
}

fn render_similar(posts: &[SimilarPost]) -> String {
    if posts.is_empty() {
        return "no similar posts found".into();
    }
    posts
        .iter()
        .map(|sp| {
            format!(
                "- ({}, {:.4}, {})",
                serde_json::to_string(&sp.text).expect("string serializes"),
                sp.score,
                sp.label
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_definitions(defs: &[SlangDefinition]) -> String {
    if defs.is_empty() {
        return "no definitions found".into();
    }
    defs.iter()
        .map(|d| format!("* {} [{}]: {}", d.term, d.approval_score, d.definition))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_verdict(v: &ClassifierVerdict) -> String {
    format!(
        "label={} probability={:.4} confidence={:.4}",
        v.label,
        v.probability,
        v.confidence()
    )
}

fn render_reasoning(r: &ReasoningOutput) -> String {
    format!(
        "suggested_label={} confidence={:.4}\nrationale: {}",
        r.suggested_label,
        r.suggested_confidence.value(),
        r.rationale
    )
}

fn render_citations(cs: &[GuidelineCitation]) -> String {
    if cs.is_empty() {
        return "no guidelines found".into();
    }
    cs.iter()
        .map(|c| format!("[{}] {}: {}", c.source, c.title, c.snippet))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Evidence gathered during one run, reused by later tool calls.
#[derive(Default)]
struct RunState {
    verdict: Option<ClassifierVerdict>,
    similar: Option<Vec<SimilarPost>>,
    definitions: Option<Vec<SlangDefinition>>,
}

/// Orchestrates tools and the planner. Reentrant: one instance serves any
/// number of concurrent runs.
#[derive(Clone)]
pub struct Agent {
    pub toolbox: Toolbox,
    pub planner: Option<Arc<dyn TextGenerator>>,
    pub clock: Arc<dyn Clock>,
}

impl Agent {
    pub fn new(
        toolbox: Toolbox,
        planner: Option<Arc<dyn TextGenerator>>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            toolbox,
            planner,
            clock,
        }
    }

    /// Runs the configured mode. In fallback mode with every tool disabled
    /// the bare post is sent to the planner for a direct judgement.
    pub fn run(&self, post: &Post, config: &AgentConfig) -> Result<AgentDecision, AgentError> {
        match config.mode {
            AgentMode::Planner => self.decide(post, config),
            AgentMode::Fallback if config.enabled_tools.is_empty() && self.planner.is_some() => {
                self.decide(post, config)
            }
            AgentMode::Fallback => self.run_fallback(post, config),
        }
    }

    /// Planner-driven run.
    pub fn decide(&self, post: &Post, config: &AgentConfig) -> Result<AgentDecision, AgentError> {
        config.validate()?;
        if post.text.trim().is_empty() {
            return Err(AgentError::InvalidPost(DomainError::EmptyText));
        }
        let planner = self.planner.as_ref().ok_or_else(|| {
            AgentError::PlannerUnavailable(EndpointError::unavailable(
                config.planner_endpoint.clone(),
                "no planner configured",
            ))
        })?;
        let mut rec = TraceRecorder::new(self.clock.clone());
        let mut state = RunState::default();
        let mut observations: Vec<Observation> = Vec::new();
        let mut cache: HashMap<(ToolKind, String), String> = HashMap::new();
        let mut failures: u32 = 0;
        let mut tool_calls = 0usize;

        loop {
            let prompt = render_planner_prompt(post, &observations, config);
            let response = planner
                .generate(&prompt)
                .map_err(AgentError::PlannerUnavailable)?;
            let action = match parse_planner_action(&response) {
                Ok(a) => a,
                Err(e) => {
                    failures += 1;
                    if failures > config.max_retries {
                        return Err(AgentError::RetriesExhausted {
                            attempts: failures,
                            last_error: e.to_string(),
                        });
                    }
                    observations.push(Observation {
                        source: ObservationSource::InvalidOutput,
                        body: format!("{e}. Respond again using the response format."),
                    });
                    continue;
                }
            };
            match action.kind {
                PlannerActionKind::CallTool => {
                    tool_calls += 1;
                    if tool_calls > config.max_tool_calls_per_run {
                        return Err(AgentError::ToolBudgetExceeded {
                            budget: config.max_tool_calls_per_run,
                        });
                    }
                    let tool = action.tool.expect("call_tool carries a tool");
                    if !config.is_enabled(tool) {
                        observations.push(Observation {
                            source: ObservationSource::Rejected,
                            body: format!("tool {tool} is not available in this configuration"),
                        });
                        continue;
                    }
                    let key = (tool, Value::Object(action.arguments.clone()).to_string());
                    let body = match cache.get(&key) {
                        Some(body) => format!("{body}\n(cached result)"),
                        None => {
                            let body = self.invoke(
                                tool,
                                &action.arguments,
                                post,
                                config,
                                &mut rec,
                                &mut state,
                            );
                            cache.insert(key, body.clone());
                            body
                        }
                    };
                    observations.push(Observation {
                        source: ObservationSource::Tool(tool),
                        body,
                    });
                }
                PlannerActionKind::Finalize => {
                    let raw = action.final_decision.expect("finalize carries a value");
                    let mut map = Map::new();
                    if let Value::Object(obj) = &raw {
                        for key in ["label", "confidence", "explanation"] {
                            if let Some(v) = obj.get(key) {
                                map.insert(key.into(), v.clone());
                            }
                        }
                    }
                    map.insert("post_id".into(), json!(post.id));
                    map.insert("retries_used".into(), json!(failures));
                    match validate_decision(&Value::Object(map)) {
                        Ok(mut decision) => {
                            decision.guideline_citations =
                                self.attach_guidelines(&mut rec, &decision.explanation, config);
                            decision.trace = rec.into_events();
                            return Ok(decision);
                        }
                        Err(e) => {
                            failures += 1;
                            if failures > config.max_retries {
                                return Err(AgentError::RetriesExhausted {
                                    attempts: failures,
                                    last_error: e.to_string(),
                                });
                            }
                            observations.push(Observation {
                                source: ObservationSource::InvalidOutput,
                                body: format!("{e}. Fix these fields and finalize again."),
                            });
                        }
                    }
                }
            }
        }
    }

    /// Runs one planner-requested tool and renders the observation. Tool
    /// failures become observations rather than run failures.
    fn invoke(
        &self,
        tool: ToolKind,
        args: &Map<String, Value>,
        post: &Post,
        config: &AgentConfig,
        rec: &mut TraceRecorder,
        state: &mut RunState,
    ) -> String {
        let text_arg = |key: &str| {
            args.get(key)
                .and_then(Value::as_str)
                .filter(|s| !s.trim().is_empty())
                .map(str::to_string)
        };
        let k_arg = |default: usize| {
            args.get("k")
                .and_then(Value::as_u64)
                .map(|k| (k as usize).max(1))
                .unwrap_or(default)
        };
        let flag = |key: &str| args.get(key).and_then(Value::as_bool).unwrap_or(true);
        let text = text_arg("text").unwrap_or_else(|| post.text.clone());
        match tool {
            ToolKind::Classifier => match self.toolbox.classify_traced(rec, &text) {
                Ok(v) => {
                    state.verdict = Some(v);
                    render_verdict(&v)
                }
                Err(e) => format!("error: {e}"),
            },
            ToolKind::SimilarPosts => {
                match self
                    .toolbox
                    .similar_posts_traced(rec, &text, k_arg(config.similar_k))
                {
                    Ok(posts) => {
                        let body = render_similar(&posts);
                        state.similar = Some(posts);
                        body
                    }
                    Err(e) => format!("error: {e}"),
                }
            }
            ToolKind::SlangDictionary => {
                let terms: Vec<String> = if let Some(t) = text_arg("term") {
                    vec![t]
                } else if let Some(list) = args.get("terms").and_then(Value::as_array) {
                    list.iter()
                        .filter_map(Value::as_str)
                        .filter(|s| !s.trim().is_empty())
                        .map(str::to_string)
                        .collect()
                } else {
                    extract_candidate_terms(&post.text, &self.toolbox.wordlist)
                };
                if terms.is_empty() {
                    return "no unfamiliar terms to look up".into();
                }
                let mut out = Vec::new();
                for term in terms {
                    match self.toolbox.lookup_slang_traced(rec, &term) {
                        Ok(defs) => {
                            out.push(format!("{term}:\n{}", render_definitions(&defs)));
                            state.definitions.get_or_insert_with(Vec::new).extend(defs);
                        }
                        Err(e) => out.push(format!("{term}: error: {e}")),
                    }
                }
                out.join("\n")
            }
            ToolKind::Reasoning => {
                let input = ReasoningInput {
                    post_text: post.text.clone(),
                    instruction: text_arg("instruction"),
                    similar_posts: state
                        .similar
                        .iter()
                        .flatten()
                        .take(MAX_REASONING_EVIDENCE)
                        .cloned()
                        .collect(),
                    classifier: state.verdict.filter(|_| flag("include_classifier")),
                    definitions: state
                        .definitions
                        .clone()
                        .filter(|_| flag("include_definitions")),
                };
                match self.toolbox.reason_traced(rec, &input) {
                    Ok(r) => render_reasoning(&r),
                    Err(e) => format!("error: {e}"),
                }
            }
            ToolKind::Guidelines => {
                let query = text_arg("query").unwrap_or_else(|| post.text.clone());
                match self
                    .toolbox
                    .guidelines_traced(rec, &query, k_arg(config.citations_k))
                {
                    Ok(cs) => render_citations(&cs),
                    Err(e) => format!("error: {e}"),
                }
            }
        }
    }

    /// Citations for the final explanation; an unavailable guideline index
    /// yields none rather than failing the decision.
    fn attach_guidelines(
        &self,
        rec: &mut TraceRecorder,
        explanation: &str,
        config: &AgentConfig,
    ) -> Vec<GuidelineCitation> {
        if !config.is_enabled(ToolKind::Guidelines) {
            return Vec::new();
        }
        self.toolbox
            .guidelines_traced(rec, explanation, config.citations_k.max(1))
            .unwrap_or_default()
    }

    /// Fixed-order pipeline: classifier, similar posts, slang lookup,
    /// reasoning, then finalize. The label comes from the reasoning model
    /// when enabled, else the classifier, else the majority of the top five
    /// similar posts (ties go to not_hate).
    pub fn run_fallback(
        &self,
        post: &Post,
        config: &AgentConfig,
    ) -> Result<AgentDecision, AgentError> {
        config.validate()?;
        if post.text.trim().is_empty() {
            return Err(AgentError::InvalidPost(DomainError::EmptyText));
        }
        let label_sources = [
            ToolKind::Classifier,
            ToolKind::SimilarPosts,
            ToolKind::Reasoning,
        ];
        if !label_sources.iter().any(|t| config.is_enabled(*t)) {
            return Err(AgentError::NoEvidence);
        }
        let tb = &self.toolbox;
        let mut rec = TraceRecorder::new(self.clock.clone());
        let failed = |tool| move |error| AgentError::ToolFailed { tool, error };

        let verdict = if config.is_enabled(ToolKind::Classifier) {
            Some(
                tb.classify_traced(&mut rec, &post.text)
                    .map_err(failed(ToolKind::Classifier))?,
            )
        } else {
            None
        };
        let similar = if config.is_enabled(ToolKind::SimilarPosts) {
            Some(
                tb.similar_posts_traced(&mut rec, &post.text, config.similar_k)
                    .map_err(failed(ToolKind::SimilarPosts))?,
            )
        } else {
            None
        };
        let definitions = if config.is_enabled(ToolKind::SlangDictionary) {
            let mut defs = Vec::new();
            for term in extract_candidate_terms(&post.text, &tb.wordlist) {
                // Dictionary outages only cost us the definitions.
                if let Ok(d) = tb.lookup_slang_traced(&mut rec, &term) {
                    defs.extend(d);
                }
            }
            Some(defs)
        } else {
            None
        };
        let top: Vec<SimilarPost> = similar
            .iter()
            .flatten()
            .take(MAX_REASONING_EVIDENCE)
            .cloned()
            .collect();
        let reasoning = if config.is_enabled(ToolKind::Reasoning) {
            let input = ReasoningInput {
                post_text: post.text.clone(),
                instruction: None,
                similar_posts: top.clone(),
                classifier: verdict,
                definitions: definitions.clone(),
            };
            Some(
                tb.reason_traced(&mut rec, &input)
                    .map_err(failed(ToolKind::Reasoning))?,
            )
        } else {
            None
        };

        let mut notes: Vec<String> = Vec::new();
        let (label, confidence) = if let Some(r) = &reasoning {
            notes.push(format!("Reasoning model: {}", r.rationale));
            (r.suggested_label, r.suggested_confidence)
        } else if let Some(v) = &verdict {
            (v.label, Confidence::saturating(v.confidence()))
        } else if !top.is_empty() {
            let hate = top.iter().filter(|s| s.label == Label::Hate).count();
            let label = Label::from_flag(hate > top.len() - hate);
            let majority: Vec<f64> = top
                .iter()
                .filter(|s| s.label == label)
                .map(|s| s.score)
                .collect();
            let mean = majority.iter().sum::<f64>() / majority.len() as f64;
            (label, Confidence::saturating(mean))
        } else {
            return Err(AgentError::NoEvidence);
        };
        if let Some(v) = &verdict {
            notes.push(format!(
                "Classifier: {} (probability of hate {:.2}).",
                v.label, v.probability
            ));
        }
        if !top.is_empty() {
            let hate = top.iter().filter(|s| s.label == Label::Hate).count();
            let mean = top.iter().map(|s| s.score).sum::<f64>() / top.len() as f64;
            notes.push(format!(
                "Similar posts: {hate} of {} nearest labelled posts are hate (mean similarity {mean:.2}).",
                top.len()
            ));
        }
        if let Some(defs) = definitions.as_ref().filter(|d| !d.is_empty()) {
            let terms: Vec<String> = defs
                .iter()
                .map(|d| format!("\"{}\" means {}", d.term, d.definition))
                .collect();
            notes.push(format!("Slang: {}", terms.join("; ")));
        }
        let explanation = format!("Judged {label}. {}", notes.join(" "));
        let guideline_citations = self.attach_guidelines(&mut rec, &explanation, config);
        Ok(AgentDecision {
            post_id: post.id.clone(),
            label,
            confidence,
            explanation,
            guideline_citations,
            trace: rec.into_events(),
            retries_used: 0,
        })
    }
}
