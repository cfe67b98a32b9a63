//! The agent's evidence tools.
//!
//! Each tool is a plain function over its endpoint. [`Toolbox`] bundles the
//! endpoints and indexes one agent run needs and exposes traced wrappers
//! that append exactly one [`ToolTraceEvent`](crate::domain::ToolTraceEvent)
//! per invocation, success or failure.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Confidence, GuidelineCitation, Label, ToolKind};
use crate::endpoints::{
    ClassifierEndpoint, DictionaryEndpoint, Embedder, EndpointError, TextGenerator,
};
use crate::guidelines::{self, ChunkPayload, GuidelineError};
use crate::index::{
    embed, EmbedError, IndexError, PostPayload, SharedIndex, SimilarPost, DEFAULT_TOP_K,
};
use crate::trace::{digest, TraceRecorder};

pub const CLASSIFIER_THRESHOLD: f64 = 0.5;
pub const MAX_DEFINITIONS: usize = 3;
pub const MAX_CANDIDATE_TERMS: usize = 3;
pub const MAX_REASONING_EVIDENCE: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("text is empty")]
    EmptyText,
    #[error("term is empty")]
    EmptyTerm,
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unparseable rationale: {0}")]
    UnparseableRationale(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("index error: {0}")]
    Index(String),
    #[error("reasoning accepts at most {MAX_REASONING_EVIDENCE} similar posts, got {0}")]
    TooMuchEvidence(usize),
    #[error(transparent)]
    Guidelines(#[from] GuidelineError),
}

impl From<IndexError> for ToolError {
    fn from(e: IndexError) -> Self {
        ToolError::Index(e.to_string())
    }
}

impl ToolError {
    pub fn is_timeout(&self) -> bool {
        matches!(
            self,
            ToolError::Endpoint(EndpointError::Timeout { .. })
                | ToolError::Embed(EmbedError::Endpoint(EndpointError::Timeout { .. }))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub label: Label,
    /// Probability of hate.
    pub probability: f64,
}

impl ClassifierVerdict {
    /// Confidence in the predicted label: `p` for hate, `1 - p` otherwise.
    pub fn confidence(&self) -> f64 {
        match self.label {
            Label::Hate => self.probability,
            Label::NotHate => 1.0 - self.probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlangDefinition {
    pub term: String,
    pub definition: String,
    pub example: Option<String>,
    /// Net votes.
    pub approval_score: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReasoningInput {
    pub post_text: String,
    /// Optional refined instruction from the planner.
    pub instruction: Option<String>,
    pub similar_posts: Vec<SimilarPost>,
    pub classifier: Option<ClassifierVerdict>,
    pub definitions: Option<Vec<SlangDefinition>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningOutput {
    pub rationale: String,
    pub suggested_label: Label,
    pub suggested_confidence: Confidence,
}

/// Calls the classifier and checks its answer. The label is derived from
/// the probability; a contradicting endpoint label is malformed.
pub fn classify(
    endpoint: &dyn ClassifierEndpoint,
    text: &str,
) -> Result<ClassifierVerdict, ToolError> {
    if text.trim().is_empty() {
        return Err(ToolError::EmptyText);
    }
    let resp = endpoint.classify(text)?;
    let p = resp.probability;
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(ToolError::MalformedResponse(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    let label = Label::from_flag(p >= CLASSIFIER_THRESHOLD);
    if let Some(raw) = resp.label {
        let claimed: Label = raw
            .parse()
            .map_err(|_| ToolError::MalformedResponse(format!("unknown label {raw:?}")))?;
        if claimed != label {
            return Err(ToolError::MalformedResponse(format!(
                "label {claimed} contradicts probability {p}"
            )));
        }
    }
    Ok(ClassifierVerdict {
        label,
        probability: p,
    })
}

/// Embeds `text` and returns its `k` nearest labelled posts.
pub fn similar_posts(
    index: &SharedIndex<PostPayload>,
    embedder: &dyn Embedder,
    text: &str,
    k: usize,
) -> Result<Vec<SimilarPost>, ToolError> {
    if text.trim().is_empty() {
        return Err(ToolError::EmptyText);
    }
    let guard = index.read().expect("post index lock poisoned");
    let query = embed(embedder, text, guard.dimension())?;
    Ok(guard
        .top_k(&query, k)?
        .into_iter()
        .map(SimilarPost::from)
        .collect())
}

/// Up to three definitions for `term`, best net votes first; equal scores
/// keep the endpoint's order.
pub fn lookup_slang(
    endpoint: &dyn DictionaryEndpoint,
    term: &str,
) -> Result<Vec<SlangDefinition>, ToolError> {
    let term = term.trim();
    if term.is_empty() {
        return Err(ToolError::EmptyTerm);
    }
    let mut defs: Vec<SlangDefinition> = endpoint
        .define(term)?
        .into_iter()
        .filter(|e| !e.definition.trim().is_empty())
        .map(|e| SlangDefinition {
            term: term.to_string(),
            definition: e.definition.trim().to_string(),
            example: e.example.filter(|x| !x.trim().is_empty()),
            approval_score: e.thumbs_up - e.thumbs_down,
        })
        .collect();
    defs.sort_by_key(|d| std::cmp::Reverse(d.approval_score));
    defs.truncate(MAX_DEFINITIONS);
    Ok(defs)
}

/// Lowercase alphabetic tokens of at least three letters that are not in
/// `wordlist`, deduplicated, in first-occurrence order, at most three.
pub fn extract_candidate_terms(text: &str, wordlist: &HashSet<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for token in text.split(|c: char| !c.is_alphabetic()) {
        if token.chars().count() < 3 {
            continue;
        }
        let token = token.to_lowercase();
        if wordlist.contains(&token) || out.contains(&token) {
            continue;
        }
        out.push(token);
        if out.len() == MAX_CANDIDATE_TERMS {
            break;
        }
    }
    out
}

/// The shipped common-English word list.
pub fn default_wordlist() -> HashSet<String> {
    parse_wordlist(include_str!("../data/wordlist.txt"))
}

pub fn parse_wordlist(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn load_wordlist(path: &Path) -> std::io::Result<HashSet<String>> {
    Ok(parse_wordlist(&std::fs::read_to_string(path)?))
}

/// Renders the reasoning-model prompt.
///
/// Similar posts appear one per line as `- (<json text>, <score>, <flag>)`;
/// the classifier and slang blocks are present only when supplied.
pub fn render_reasoning_prompt(input: &ReasoningInput) -> String {
    let mut p = String::new();
    p.push_str("You are a hate speech analyst. Decide whether the post below is hate speech, using the evidence provided.\n");
    if let Some(instr) = input
        .instruction
        .as_deref()
        .filter(|s| !s.trim().is_empty())
    {
        let _ = writeln!(p, "Instruction: {}", instr.trim());
    }
    p.push_str("\nPOST:\n<<<\n");
    p.push_str(&input.post_text);
    p.push_str("\n>>>\n\nSIMILAR POSTS (text, score, flag):\n");
    if input.similar_posts.is_empty() {
        p.push_str("(none)\n");
    }
    for sp in &input.similar_posts {
        let _ = writeln!(
            p,
            "- ({}, {:.4}, {})",
            serde_json::to_string(&sp.text).expect("string serializes"),
            sp.score,
            sp.label
        );
    }
    if let Some(v) = &input.classifier {
        let _ = writeln!(
            p,
            "\nCLASSIFIER: label={} probability={:.4}",
            v.label, v.probability
        );
    }
    if let Some(defs) = &input.definitions {
        p.push_str("\nSLANG DEFINITIONS:\n");
        if defs.is_empty() {
            p.push_str("(none)\n");
        }
        for d in defs {
            let _ = writeln!(p, "* {} [{}]: {}", d.term, d.approval_score, d.definition);
        }
    }
    p.push_str(
        "\nRespond with exactly these lines:\nLABEL: hate or not_hate\nCONF: a number between 0 and 1\nRATIONALE: your reasoning\n",
    );
    p
}

fn tagged<'a>(line: &'a str, tag: &str) -> Option<&'a str> {
    let t = line.trim_start();
    if t.len() >= tag.len() && t[..tag.len()].eq_ignore_ascii_case(tag) {
        Some(t[tag.len()..].trim())
    } else {
        None
    }
}

/// Parses `LABEL:` / `CONF:` / `RATIONALE:` tagged output. The rationale
/// runs from its tag to the end of the response.
pub fn parse_reasoning_response(text: &str) -> Result<ReasoningOutput, ToolError> {
    let lines: Vec<&str> = text.lines().collect();
    let label_raw = lines
        .iter()
        .find_map(|l| tagged(l, "LABEL:"))
        .ok_or_else(|| ToolError::UnparseableRationale("missing LABEL line".into()))?;
    let label: Label = label_raw
        .parse()
        .map_err(|_| ToolError::UnparseableRationale(format!("bad label {label_raw:?}")))?;
    let conf_raw = lines
        .iter()
        .find_map(|l| tagged(l, "CONF:"))
        .ok_or_else(|| ToolError::UnparseableRationale("missing CONF line".into()))?;
    let confidence = conf_raw
        .parse::<f64>()
        .ok()
        .and_then(|c| Confidence::new(c).ok())
        .ok_or_else(|| ToolError::UnparseableRationale(format!("bad confidence {conf_raw:?}")))?;
    let at = lines
        .iter()
        .position(|l| tagged(l, "RATIONALE:").is_some())
        .ok_or_else(|| ToolError::UnparseableRationale("missing RATIONALE line".into()))?;
    let mut rationale = tagged(lines[at], "RATIONALE:")
        .unwrap_or_default()
        .to_string();
    for l in &lines[at + 1..] {
        rationale.push('\n');
        rationale.push_str(l);
    }
    let rationale = rationale.trim().to_string();
    if rationale.is_empty() {
        return Err(ToolError::UnparseableRationale("empty rationale".into()));
    }
    Ok(ReasoningOutput {
        rationale,
        suggested_label: label,
        suggested_confidence: confidence,
    })
}

/// Asks the reasoning model for a judgement over the gathered evidence.
pub fn reason(
    generator: &dyn TextGenerator,
    input: &ReasoningInput,
) -> Result<ReasoningOutput, ToolError> {
    if input.post_text.trim().is_empty() {
        return Err(ToolError::EmptyText);
    }
    if input.similar_posts.len() > MAX_REASONING_EVIDENCE {
        return Err(ToolError::TooMuchEvidence(input.similar_posts.len()));
    }
    let response = generator.generate(&render_reasoning_prompt(input))?;
    parse_reasoning_response(&response)
}

/// Endpoints and indexes shared by every agent run. Cheap to clone.
#[derive(Clone)]
pub struct Toolbox {
    pub classifier: Arc<dyn ClassifierEndpoint>,
    pub embedder: Arc<dyn Embedder>,
    pub posts: SharedIndex<PostPayload>,
    pub dictionary: Arc<dyn DictionaryEndpoint>,
    pub reasoner: Arc<dyn TextGenerator>,
    pub guidelines: SharedIndex<ChunkPayload>,
    pub wordlist: Arc<HashSet<String>>,
}

impl Toolbox {
    pub fn classify_traced(
        &self,
        rec: &mut TraceRecorder,
        text: &str,
    ) -> Result<ClassifierVerdict, ToolError> {
        rec.record(
            ToolKind::Classifier,
            &format!("text={:?}", digest(text, 60)),
            || classify(self.classifier.as_ref(), text),
            |v| format!("label={} probability={:.4}", v.label, v.probability),
        )
    }

    pub fn similar_posts_traced(
        &self,
        rec: &mut TraceRecorder,
        text: &str,
        k: usize,
    ) -> Result<Vec<SimilarPost>, ToolError> {
        rec.record(
            ToolKind::SimilarPosts,
            &format!("text={:?} k={k}", digest(text, 60)),
            || similar_posts(&self.posts, self.embedder.as_ref(), text, k),
            |hits| {
                let flags: Vec<String> = hits
                    .iter()
                    .map(|h| format!("{} {}:{:.4}", h.record_id, h.label, h.score))
                    .collect();
                format!("{} hits, raw cosine [{}]", hits.len(), flags.join(", "))
            },
        )
    }

    pub fn lookup_slang_traced(
        &self,
        rec: &mut TraceRecorder,
        term: &str,
    ) -> Result<Vec<SlangDefinition>, ToolError> {
        rec.record(
            ToolKind::SlangDictionary,
            &format!("term={term:?}"),
            || lookup_slang(self.dictionary.as_ref(), term),
            |defs| format!("{} definitions", defs.len()),
        )
    }

    pub fn reason_traced(
        &self,
        rec: &mut TraceRecorder,
        input: &ReasoningInput,
    ) -> Result<ReasoningOutput, ToolError> {
        rec.record(
            ToolKind::Reasoning,
            &format!(
                "evidence={} classifier={} definitions={}",
                input.similar_posts.len(),
                input.classifier.is_some(),
                input.definitions.as_ref().map_or(0, Vec::len)
            ),
            || reason(self.reasoner.as_ref(), input),
            |o| {
                format!(
                    "suggested_label={} confidence={:.4}",
                    o.suggested_label,
                    o.suggested_confidence.value()
                )
            },
        )
    }

    pub fn guidelines_traced(
        &self,
        rec: &mut TraceRecorder,
        query: &str,
        k: usize,
    ) -> Result<Vec<GuidelineCitation>, ToolError> {
        rec.record(
            ToolKind::Guidelines,
            &format!("query={:?} k={k}", digest(query, 60)),
            || {
                guidelines::retrieve_guidelines(&self.guidelines, self.embedder.as_ref(), query, k)
                    .map_err(ToolError::from)
            },
            |cs| {
                let titles: Vec<&str> = cs.iter().map(|c| c.title.as_str()).collect();
                format!("{} citations {:?}", cs.len(), titles)
            },
        )
    }

    pub fn default_k() -> usize {
        DEFAULT_TOP_K
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoints::{ClassifierResponse, DictionaryEntry};
    use crate::stubs::{FixedClassifier, ScriptedPlanner, StaticDictionary, Unreachable};

    #[test]
    fn classify_thresholds_probability() {
        assert_eq!(
            classify(&FixedClassifier(0.93), "x").unwrap(),
            ClassifierVerdict {
                label: Label::Hate,
                probability: 0.93
            }
        );
        assert_eq!(
            classify(&FixedClassifier(0.12), "x").unwrap(),
            ClassifierVerdict {
                label: Label::NotHate,
                probability: 0.12
            }
        );
        assert_eq!(
            classify(&FixedClassifier(0.5), "x").unwrap().label,
            Label::Hate
        );
        assert!(matches!(
            classify(&FixedClassifier(1.3), "x"),
            Err(ToolError::MalformedResponse(_))
        ));
        assert_eq!(
            classify(&FixedClassifier(0.3), " "),
            Err(ToolError::EmptyText)
        );
    }

    struct Liar;
    impl ClassifierEndpoint for Liar {
        fn classify(&self, _: &str) -> Result<ClassifierResponse, EndpointError> {
            Ok(ClassifierResponse {
                label: Some("not_hate".into()),
                probability: 0.9,
            })
        }
    }

    #[test]
    fn contradicting_label_is_malformed() {
        assert!(matches!(
            classify(&Liar, "x"),
            Err(ToolError::MalformedResponse(_))
        ));
    }

    fn entry(votes: i64) -> DictionaryEntry {
        DictionaryEntry {
            definition: format!("def {votes}"),
            example: None,
            thumbs_up: votes,
            thumbs_down: 0,
        }
    }

    #[test]
    fn slang_sorted_by_votes_capped_at_three() {
        let dict = StaticDictionary::new()
            .with("yeet", [10, 50, 3, 50, 1].into_iter().map(entry).collect());
        let defs = lookup_slang(&dict, "yeet").unwrap();
        let votes: Vec<i64> = defs.iter().map(|d| d.approval_score).collect();
        assert_eq!(votes, [50, 50, 10]);
        // Ties keep response order: the first 50 was the second entry.
        assert_eq!(defs[0].definition, "def 50");
        assert!(lookup_slang(&dict, "unknown").unwrap().is_empty());
        assert_eq!(lookup_slang(&dict, "   "), Err(ToolError::EmptyTerm));
        assert!(matches!(
            lookup_slang(&Unreachable("dict".into()), "yeet"),
            Err(ToolError::Endpoint(_))
        ));
    }

    #[test]
    fn candidate_terms_against_shipped_wordlist() {
        let wl = default_wordlist();
        assert_eq!(
            extract_candidate_terms("you are a sigma grindset npc", &wl),
            ["sigma", "grindset", "npc"]
        );
        assert!(extract_candidate_terms("you are the people", &wl).is_empty());
        assert_eq!(
            extract_candidate_terms("zorp blarg quux frob zorp wibble", &wl),
            ["zorp", "blarg", "quux"]
        );
        assert_eq!(
            extract_candidate_terms("NPC!! npc... Sigma", &wl),
            ["npc", "sigma"]
        );
    }

    #[test]
    fn reasoning_parser_happy_path_and_failures() {
        let out =
            parse_reasoning_response("LABEL: hate\nCONF: 0.8\nRATIONALE: targets group").unwrap();
        assert_eq!(out.suggested_label, Label::Hate);
        assert_eq!(out.suggested_confidence.value(), 0.8);
        assert_eq!(out.rationale, "targets group");
        assert!(matches!(
            parse_reasoning_response("CONF: 0.8\nRATIONALE: x"),
            Err(ToolError::UnparseableRationale(_))
        ));
        assert!(matches!(
            parse_reasoning_response("LABEL: hate\nCONF: 2\nRATIONALE: x"),
            Err(ToolError::UnparseableRationale(_))
        ));
        let multi =
            parse_reasoning_response("thinking...\nlabel: not_hate\nconf: 0.3\nRationale: a\nb")
                .unwrap();
        assert_eq!(multi.rationale, "a\nb");
        assert_eq!(multi.suggested_label, Label::NotHate);
    }

    fn sp(i: usize) -> SimilarPost {
        SimilarPost {
            record_id: format!("r{i}"),
            text: format!("post\n{i}"),
            score: 0.5,
            label: Label::from_flag(i.is_multiple_of(2)),
        }
    }

    #[test]
    fn prompt_has_one_line_per_similar_post() {
        let input = ReasoningInput {
            post_text: "the post".into(),
            similar_posts: (0..5).map(sp).collect(),
            ..Default::default()
        };
        let prompt = render_reasoning_prompt(&input);
        assert_eq!(prompt.lines().filter(|l| l.starts_with("- (")).count(), 5);
        assert!(!prompt.contains("CLASSIFIER:"));
        assert!(!prompt.contains("SLANG DEFINITIONS"));
        let with_extras = render_reasoning_prompt(&ReasoningInput {
            classifier: Some(ClassifierVerdict {
                label: Label::Hate,
                probability: 0.9,
            }),
            definitions: Some(vec![]),
            ..input
        });
        assert!(with_extras.contains("CLASSIFIER: label=hate probability=0.9000"));
        assert!(with_extras.contains("SLANG DEFINITIONS"));
    }

    #[test]
    fn reason_calls_generator_and_checks_arity() {
        let gen = ScriptedPlanner::new(["LABEL: hate\nCONF: 0.8\nRATIONALE: targets group"]);
        let input = ReasoningInput {
            post_text: "p".into(),
            ..Default::default()
        };
        let out = reason(&gen, &input).unwrap();
        assert_eq!(out.suggested_label, Label::Hate);
        let too_many = ReasoningInput {
            post_text: "p".into(),
            similar_posts: (0..6).map(sp).collect(),
            ..Default::default()
        };
        assert_eq!(reason(&gen, &too_many), Err(ToolError::TooMuchEvidence(6)));
        let bad = ScriptedPlanner::new(["CONF: 0.8\nRATIONALE: no label"]);
        assert!(matches!(
            reason(&bad, &input),
            Err(ToolError::UnparseableRationale(_))
        ));
    }
}
