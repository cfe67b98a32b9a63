//! Agent-based hate speech moderation: a planner model orchestrates a
//! classifier, similar-post retrieval, a slang dictionary, a reasoning model
//! and platform guideline retrieval, and moderator feedback grows the
//! retrieval corpus.

pub mod agent;
pub mod domain;
pub mod endpoints;
pub mod eval;
pub mod feedback;
pub mod guidelines;
pub mod index;
pub mod stubs;
pub mod tools;
pub mod trace;

pub use agent::{Agent, AgentConfig, AgentError, AgentMode};
pub use domain::{
    negate, validate_decision, AgentDecision, Confidence, GuidelineCitation, GuidelineSource,
    Label, Outcome, Platform, Post, Timestamp, ToolKind, ToolTraceEvent, ValidationError,
    Violation, MAX_RETRIES,
};
pub use eval::{f1_scores, run_ablation, run_eval, tool_stats, EvalResult, ToolStats};
pub use feedback::{FeedbackRecord, FeedbackStore, Verdict};
pub use guidelines::{GuidelineDocument, GuidelineIndex};
pub use index::{PostIndex, PostPayload, SharedIndex, SimilarPost, Vector, VectorIndex};
pub use tools::Toolbox;
pub use trace::{Clock, SteppingClock, SystemClock};
