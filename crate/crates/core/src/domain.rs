//! Shared domain types: posts, labels, decisions and the tool trace schema.
//!
//! Every value here is immutable once constructed and is `Send + Sync`, so
//! decisions can be handed between request handlers and the evaluation
//! workers without copying through intermediate representations.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// Upper bound on planner re-asks after an invalid finalize.
pub const MAX_RETRIES: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("post text is empty")]
    EmptyText,
    #[error("confidence {0} is outside [0, 1]")]
    OutOfRangeConfidence(f64),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("unknown {kind} {value:?}")]
    UnknownVariant { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Reddit,
    X,
    Meta,
    Other,
}

/// A unit of user text under moderation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<Platform>,
}

impl Post {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyText);
        }
        Ok(Self {
            id: id.into(),
            text,
            platform: None,
        })
    }

    pub fn with_platform(mut self, platform: Platform) -> Self {
        self.platform = Some(platform);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Hate,
    NotHate,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Hate, Label::NotHate];

    pub fn negate(self) -> Label {
        match self {
            Label::Hate => Label::NotHate,
            Label::NotHate => Label::Hate,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hate => "hate",
            Label::NotHate => "not_hate",
        }
    }

    /// `true` for hate, matching the `1 = hate` corpus convention.
    pub fn is_hate(self) -> bool {
        self == Label::Hate
    }

    pub fn from_flag(hate: bool) -> Label {
        if hate {
            Label::Hate
        } else {
            Label::NotHate
        }
    }
}

/// Returns the other label.
pub fn negate(label: Label) -> Label {
    label.negate()
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = DomainError;

    /// Accepts the canonical names plus the spellings models tend to emit
    /// ("not hate", "non-hate", ...), case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .trim_matches(|c: char| c == '"' || c == '\'' || c == '.')
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "hate" | "1" => Ok(Label::Hate),
            "not_hate" | "non_hate" | "nothate" | "0" => Ok(Label::NotHate),
            _ => Err(DomainError::UnknownLabel(s.to_string())),
        }
    }
}

/// A probability-like score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Confidence(f64);

impl Confidence {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(DomainError::OutOfRangeConfidence(value))
        }
    }

    /// Clamps into range; NaN maps to zero.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Self(0.0)
        } else {
            Self(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Confidence {
    type Error = DomainError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Confidence::new(value)
    }
}

impl From<Confidence> for f64 {
    fn from(c: Confidence) -> f64 {
        c.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Classifier,
    SimilarPosts,
    SlangDictionary,
    Reasoning,
    Guidelines,
}

impl ToolKind {
    pub const ALL: [ToolKind; 5] = [
        ToolKind::Classifier,
        ToolKind::SimilarPosts,
        ToolKind::SlangDictionary,
        ToolKind::Reasoning,
        ToolKind::Guidelines,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolKind::Classifier => "classifier",
            ToolKind::SimilarPosts => "similar_posts",
            ToolKind::SlangDictionary => "slang_dictionary",
            ToolKind::Reasoning => "reasoning",
            ToolKind::Guidelines => "guidelines",
        }
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolKind {
    type Err = DomainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        ToolKind::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DomainError::UnknownVariant {
                kind: "tool",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Error,
}

/// Wall-clock instant with microsecond resolution. Serialized as RFC 3339.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub fn from_micros(micros: i64) -> Self {
        Self(micros)
    }

    pub fn as_micros(self) -> i64 {
        self.0
    }

    pub fn to_rfc3339(self) -> String {
        DateTime::<Utc>::from_timestamp_micros(self.0)
            .unwrap_or_default()
            .to_rfc3339_opts(SecondsFormat::Micros, true)
    }

    pub fn parse_rfc3339(s: &str) -> Result<Self, chrono::ParseError> {
        DateTime::parse_from_rfc3339(s).map(|dt| Self(dt.timestamp_micros()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse_rfc3339(&s).map_err(serde::de::Error::custom)
    }
}

/// One tool invocation as seen by the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolTraceEvent {
    pub tool: ToolKind,
    pub started_at: Timestamp,
    /// Seconds of wall-clock time around the whole call.
    pub duration: f64,
    pub outcome: Outcome,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidelineSource {
    Reddit,
    X,
    Meta,
    Unesco,
    Un,
}

impl GuidelineSource {
    pub const ALL: [GuidelineSource; 5] = [
        GuidelineSource::Reddit,
        GuidelineSource::X,
        GuidelineSource::Meta,
        GuidelineSource::Unesco,
        GuidelineSource::Un,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GuidelineSource::Reddit => "reddit",
            GuidelineSource::X => "x",
            GuidelineSource::Meta => "meta",
            GuidelineSource::Unesco => "unesco",
            GuidelineSource::Un => "un",
        }
    }
}

impl fmt::Display for GuidelineSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidelineSource {
    type Err = DomainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GuidelineSource::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DomainError::UnknownVariant {
                kind: "guideline source",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineCitation {
    pub source: GuidelineSource,
    pub title: String,
    pub snippet: String,
}

/// The structured verdict returned for one post.
///
/// Deserialization goes through [`validate_decision`], so a decoded value
/// always satisfies the same invariants as one produced by the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value")]
pub struct AgentDecision {
    pub post_id: String,
    pub label: Label,
    pub confidence: Confidence,
    pub explanation: String,
    pub guideline_citations: Vec<GuidelineCitation>,
    pub trace: Vec<ToolTraceEvent>,
    pub retries_used: u32,
}

impl TryFrom<Value> for AgentDecision {
    type Error = ValidationError;
    fn try_from(value: Value) -> Result<Self, Self::Error> {
        validate_decision(&value)
    }
}

impl AgentDecision {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("decision serializes")
    }
}

/// A single broken constraint found while validating a raw decision.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` has the wrong type (expected {expected})")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
    #[error("confidence {0} is outside [0, 1]")]
    OutOfRangeConfidence(f64),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("explanation is empty")]
    EmptyExplanation,
    #[error("retries_used {0} exceeds the limit of {MAX_RETRIES}")]
    RetriesOutOfRange(u64),
    #[error("invalid entry in `{field}`: {detail}")]
    InvalidEntry { field: &'static str, detail: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid decision: ")?;
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Validates a raw structured value into an [`AgentDecision`].
///
/// `post_id`, `label`, `confidence` and `explanation` are required. The
/// citation list, trace and retry count default to empty / zero when absent.
/// All violations are collected rather than stopping at the first one.
pub fn validate_decision(raw: &Value) -> Result<AgentDecision, ValidationError> {
    let mut violations = Vec::new();
    let empty = Map::new();
    let obj = match raw.as_object() {
        Some(o) => o,
        None => {
            violations.push(Violation::WrongType {
                field: "decision",
                expected: "object",
            });
            &empty
        }
    };

    let post_id = match obj.get("post_id") {
        None | Some(Value::Null) => {
            violations.push(Violation::MissingField("post_id"));
            None
        }
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            violations.push(Violation::WrongType {
                field: "post_id",
                expected: "string",
            });
            None
        }
    };

    let label = match obj.get("label") {
        None | Some(Value::Null) => {
            violations.push(Violation::MissingField("label"));
            None
        }
        Some(Value::String(s)) => match s.parse::<Label>() {
            Ok(l) => Some(l),
            Err(_) => {
                violations.push(Violation::UnknownLabel(s.clone()));
                None
            }
        },
        Some(other) => {
            violations.push(Violation::UnknownLabel(other.to_string()));
            None
        }
    };

    let confidence = match obj.get("confidence") {
        None | Some(Value::Null) => {
            violations.push(Violation::MissingField("confidence"));
            None
        }
        Some(Value::Number(n)) => {
            let v = n.as_f64().unwrap_or(f64::NAN);
            match Confidence::new(v) {
                Ok(c) => Some(c),
                Err(_) => {
                    violations.push(Violation::OutOfRangeConfidence(v));
                    None
                }
            }
        }
        Some(_) => {
            violations.push(Violation::WrongType {
                field: "confidence",
                expected: "number",
            });
            None
        }
    };

    let explanation = match obj.get("explanation") {
        None | Some(Value::Null) => {
            violations.push(Violation::MissingField("explanation"));
            None
        }
        Some(Value::String(s)) if s.trim().is_empty() => {
            violations.push(Violation::EmptyExplanation);
            None
        }
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            violations.push(Violation::WrongType {
                field: "explanation",
                expected: "string",
            });
            None
        }
    };

    let guideline_citations = match obj.get("guideline_citations") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => match serde_json::from_value::<Vec<GuidelineCitation>>(v.clone()) {
            Ok(cs) => {
                if cs.iter().any(|c| c.snippet.trim().is_empty()) {
                    violations.push(Violation::InvalidEntry {
                        field: "guideline_citations",
                        detail: "citation snippet is empty".into(),
                    });
                }
                cs
            }
            Err(e) => {
                violations.push(Violation::InvalidEntry {
                    field: "guideline_citations",
                    detail: e.to_string(),
                });
                Vec::new()
            }
        },
    };

    let trace = match obj.get("trace") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => match serde_json::from_value::<Vec<ToolTraceEvent>>(v.clone()) {
            Ok(events) => {
                if let Some(bad) = events
                    .iter()
                    .find(|e| !e.duration.is_finite() || e.duration < 0.0)
                {
                    violations.push(Violation::InvalidEntry {
                        field: "trace",
                        detail: format!("{} event has duration {}", bad.tool, bad.duration),
                    });
                }
                events
            }
            Err(e) => {
                violations.push(Violation::InvalidEntry {
                    field: "trace",
                    detail: e.to_string(),
                });
                Vec::new()
            }
        },
    };

    let retries_used = match obj.get("retries_used") {
        None | Some(Value::Null) => 0,
        Some(v) => match v.as_u64() {
            Some(n) if n <= MAX_RETRIES as u64 => n as u32,
            Some(n) => {
                violations.push(Violation::RetriesOutOfRange(n));
                0
            }
            None => {
                violations.push(Violation::WrongType {
                    field: "retries_used",
                    expected: "non-negative integer",
                });
                0
            }
        },
    };

    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }
    Ok(AgentDecision {
        post_id: post_id.expect("checked"),
        label: label.expect("checked"),
        confidence: confidence.expect("checked"),
        explanation: explanation.expect("checked"),
        guideline_citations,
        trace,
        retries_used,
    })
}
