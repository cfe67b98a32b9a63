//! In-process stand-ins for the external endpoints.
//!
//! These back the test suites, the acceptance harness and the CLI's stub
//! mode, which runs ingestion, evaluation and ablation with zero live
//! endpoints. The noisy oracles know the gold label of each evaluation post
//! and answer correctly with a fixed probability, decided by hashing
//! `(seed, salt, text)` so runs are reproducible.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::domain::{Label, ToolKind};
use crate::endpoints::{
    ClassifierEndpoint, ClassifierResponse, DictionaryEndpoint, DictionaryEntry, Embedder,
    EndpointError, TextGenerator,
};
use crate::guidelines::ChunkPayload;
use crate::index::{PostPayload, SharedIndex};
use crate::tools::{default_wordlist, Toolbox};

/// Uniform draw in `[0, 1)` derived from the inputs.
pub fn unit_hash(seed: u64, salt: &str, text: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

/// Feature-hashing embedder: lowercase alphanumeric tokens are hashed into
/// buckets. Identical texts map to identical vectors, so a post retrieves
/// itself with similarity 1.0.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0);
        Self { dimension }
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dimension];
        let lower = text.to_lowercase();
        let mut any = false;
        for token in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            any = true;
            let u = unit_hash(0, "bucket", token);
            let bucket = (u * self.dimension as f64) as usize % self.dimension;
            let sign = if unit_hash(0, "sign", token) < 0.5 {
                -1.0
            } else {
                1.0
            };
            v[bucket] += sign;
        }
        if !any || v.iter().all(|&c| c == 0.0) {
            let bucket = (unit_hash(0, "whole", text) * self.dimension as f64) as usize;
            v[bucket % self.dimension] = 1.0;
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EndpointError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Answers with the gold label with probability `accuracy`.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    gold: Arc<HashMap<String, Label>>,
    accuracy: f64,
    seed: u64,
    salt: &'static str,
}

impl NoisyOracle {
    pub fn new(
        gold: Arc<HashMap<String, Label>>,
        accuracy: f64,
        seed: u64,
        salt: &'static str,
    ) -> Self {
        Self {
            gold,
            accuracy: accuracy.clamp(0.0, 1.0),
            seed,
            salt,
        }
    }

    /// Label plus a confidence in `[0.5, 1]`. Texts without a gold label
    /// are judged not_hate.
    pub fn judge(&self, text: &str) -> (Label, f64) {
        let Some(&gold) = self.gold.get(text) else {
            return (
                Label::NotHate,
                0.5 + 0.4 * unit_hash(self.seed, "conf", text),
            );
        };
        let correct = unit_hash(self.seed, self.salt, text) < self.accuracy;
        let label = if correct { gold } else { gold.negate() };
        let conf = 0.55 + 0.4 * unit_hash(self.seed, "conf", text);
        (label, conf)
    }

    /// Probability of hate consistent with [`judge`](Self::judge).
    pub fn hate_probability(&self, text: &str) -> f64 {
        let (label, conf) = self.judge(text);
        match label {
            Label::Hate => conf,
            Label::NotHate => 1.0 - conf,
        }
    }
}

/// Classifier stub backed by a [`NoisyOracle`].
pub struct OracleClassifier(pub NoisyOracle);

impl ClassifierEndpoint for OracleClassifier {
    fn classify(&self, text: &str) -> Result<ClassifierResponse, EndpointError> {
        let p = self.0.hate_probability(text);
        Ok(ClassifierResponse {
            label: Some(Label::from_flag(p >= 0.5).as_str().to_string()),
            probability: p,
        })
    }
}

/// Classifier stub that always returns the same probability.
pub struct FixedClassifier(pub f64);

impl ClassifierEndpoint for FixedClassifier {
    fn classify(&self, _text: &str) -> Result<ClassifierResponse, EndpointError> {
        Ok(ClassifierResponse {
            label: None,
            probability: self.0,
        })
    }
}

/// Extracts the post text from a reasoning or planner prompt, which both
/// fence it between `<<<` and `>>>` lines.
pub fn extract_post(prompt: &str) -> Option<&str> {
    let start = prompt.find("<<<\n")? + 4;
    let end = start + prompt[start..].find("\n>>>")?;
    Some(&prompt[start..end])
}

/// Reasoning-model stub emitting the `LABEL/CONF/RATIONALE` format.
pub struct OracleReasoner(pub NoisyOracle);

impl TextGenerator for OracleReasoner {
    fn generate(&self, prompt: &str) -> Result<String, EndpointError> {
        let text = extract_post(prompt)
            .ok_or_else(|| EndpointError::malformed("stub-reasoner", "prompt has no post block"))?;
        let (label, conf) = self.0.judge(text);
        Ok(format!(
            "LABEL: {label}\nCONF: {conf:.4}\nRATIONALE: stub reasoner judged the post {label} after weighing the supplied evidence."
        ))
    }
}

/// Annotation-model stub: title is the first heading (or first words),
/// summary is the first sentence of the body.
pub struct EchoAnnotator;

impl TextGenerator for EchoAnnotator {
    fn generate(&self, prompt: &str) -> Result<String, EndpointError> {
        let body = extract_post(prompt).ok_or_else(|| {
            EndpointError::malformed("stub-annotator", "prompt has no chunk block")
        })?;
        let title = body
            .lines()
            .find(|l| l.trim_start().starts_with('#'))
            .map(|l| l.trim_start_matches('#').trim().to_string())
            .unwrap_or_else(|| {
                body.split_whitespace()
                    .take(6)
                    .collect::<Vec<_>>()
                    .join(" ")
            });
        let flat = body
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .collect::<Vec<_>>()
            .join(" ");
        let summary = flat
            .split_inclusive('.')
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .unwrap_or(title.as_str())
            .to_string();
        Ok(format!("TITLE: {title}\nSUMMARY: {summary}"))
    }
}

/// Dictionary stub with a fixed table. Unknown terms have no entries.
#[derive(Default)]
pub struct StaticDictionary {
    entries: HashMap<String, Vec<DictionaryEntry>>,
}

impl StaticDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, term: &str, entries: Vec<DictionaryEntry>) -> Self {
        self.entries.insert(term.to_lowercase(), entries);
        self
    }

    /// A small table of slang terms used by the demo fixtures.
    pub fn demo() -> Self {
        let e = |d: &str, ex: &str, up: i64, down: i64| DictionaryEntry {
            definition: d.into(),
            example: Some(ex.into()),
            thumbs_up: up,
            thumbs_down: down,
        };
        Self::new()
            .with(
                "npc",
                vec![e(
                    "A person who seems to lack independent thought.",
                    "He's such an npc.",
                    900,
                    120,
                )],
            )
            .with(
                "sigma",
                vec![e(
                    "A self-styled lone-wolf personality archetype.",
                    "Sigma grindset.",
                    640,
                    210,
                )],
            )
            .with(
                "grindset",
                vec![e(
                    "An obsessive hustle mentality.",
                    "Rise and grind, grindset.",
                    300,
                    40,
                )],
            )
            .with(
                "ratio",
                vec![e(
                    "A reply that gets more engagement than the original post.",
                    "Ratio + L.",
                    500,
                    90,
                )],
            )
            .with(
                "simp",
                vec![e(
                    "Someone who is overly devoted to another person.",
                    "Stop being a simp.",
                    700,
                    300,
                )],
            )
    }
}

impl DictionaryEndpoint for StaticDictionary {
    fn define(&self, term: &str) -> Result<Vec<DictionaryEntry>, EndpointError> {
        Ok(self
            .entries
            .get(&term.to_lowercase())
            .cloned()
            .unwrap_or_default())
    }
}

/// Every call fails as if the service were down.
#[derive(Debug, Clone)]
pub struct Unreachable(pub String);

impl Unreachable {
    fn err(&self) -> EndpointError {
        EndpointError::Unavailable {
            url: self.0.clone(),
            status: None,
            detail: "connection refused".into(),
        }
    }
}

impl Embedder for Unreachable {
    fn embed_batch(&self, _: &[&str]) -> Result<Vec<Vec<f32>>, EndpointError> {
        Err(self.err())
    }
    fn probe(&self) -> bool {
        false
    }
}

impl ClassifierEndpoint for Unreachable {
    fn classify(&self, _: &str) -> Result<ClassifierResponse, EndpointError> {
        Err(self.err())
    }
    fn probe(&self) -> bool {
        false
    }
}

impl DictionaryEndpoint for Unreachable {
    fn define(&self, _: &str) -> Result<Vec<DictionaryEntry>, EndpointError> {
        Err(self.err())
    }
    fn probe(&self) -> bool {
        false
    }
}

impl TextGenerator for Unreachable {
    fn generate(&self, _: &str) -> Result<String, EndpointError> {
        Err(self.err())
    }
    fn probe(&self) -> bool {
        false
    }
}

/// Planner that replays canned responses in order.
///
/// Script files hold one response per block; blocks are separated by a
/// line containing only `===`.
#[derive(Debug, Default)]
pub struct ScriptedPlanner {
    responses: Mutex<VecDeque<String>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedPlanner {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn parse_script(text: &str) -> Vec<String> {
        let mut blocks = Vec::new();
        let mut cur: Vec<&str> = Vec::new();
        for line in text.lines() {
            if line.trim() == "===" {
                blocks.push(cur.join("\n").trim().to_string());
                cur.clear();
            } else {
                cur.push(line);
            }
        }
        let last = cur.join("\n").trim().to_string();
        if !last.is_empty() {
            blocks.push(last);
        }
        blocks
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(Self::parse_script(&std::fs::read_to_string(
            path,
        )?)))
    }

    pub fn remaining(&self) -> usize {
        self.responses.lock().expect("planner lock").len()
    }

    /// Every prompt received so far, in order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("planner lock").clone()
    }
}

impl TextGenerator for ScriptedPlanner {
    fn generate(&self, prompt: &str) -> Result<String, EndpointError> {
        self.prompts
            .lock()
            .expect("planner lock")
            .push(prompt.to_string());
        self.responses
            .lock()
            .expect("planner lock")
            .pop_front()
            .ok_or_else(|| EndpointError::unavailable("scripted-planner", "script exhausted"))
    }
}

/// Rule-following planner stub.
///
/// Calls every rostered evidence tool once (in roster order, guidelines
/// excluded), then finalizes with the reasoning label if present, else the
/// classifier label, else the oracle's direct judgement. With an empty
/// roster it answers directly from the oracle, which is how the "no tools"
/// configuration is exercised without a live model.
pub struct StubPlanner {
    pub oracle: NoisyOracle,
}

impl StubPlanner {
    fn roster(prompt: &str) -> Vec<ToolKind> {
        let Some(start) = prompt.find("## Tools\n") else {
            return Vec::new();
        };
        prompt[start + 9..]
            .lines()
            .take_while(|l| l.starts_with("- "))
            .filter_map(|l| l[2..].split(':').next()?.parse().ok())
            .collect()
    }

    fn evidence_value<'a>(prompt: &'a str, tool: ToolKind, key: &str) -> Option<&'a str> {
        let marker = format!("] {}\n", tool.as_str());
        let start = prompt.rfind(&marker)? + marker.len();
        let block = &prompt[start..];
        let block = &block[..block.find("\n### ").unwrap_or(block.len())];
        let at = block.find(key)? + key.len();
        block[at..].split_whitespace().next()
    }
}

impl TextGenerator for StubPlanner {
    fn generate(&self, prompt: &str) -> Result<String, EndpointError> {
        let post = extract_post(prompt)
            .ok_or_else(|| EndpointError::malformed("stub-planner", "prompt has no post block"))?;
        for tool in Self::roster(prompt) {
            if tool == ToolKind::Guidelines {
                continue;
            }
            if !prompt.contains(&format!("] {}\n", tool.as_str())) {
                return Ok(format!("ACTION: call_tool\nTOOL: {tool}\nARGS: {{}}"));
            }
        }
        let from_evidence = Self::evidence_value(prompt, ToolKind::Reasoning, "suggested_label=")
            .zip(Self::evidence_value(
                prompt,
                ToolKind::Reasoning,
                "confidence=",
            ))
            .or_else(|| {
                Self::evidence_value(prompt, ToolKind::Classifier, "label=").zip(
                    Self::evidence_value(prompt, ToolKind::Classifier, "confidence="),
                )
            })
            .and_then(|(l, c)| Some((l.parse::<Label>().ok()?, c.parse::<f64>().ok()?)));
        let (label, conf) = from_evidence.unwrap_or_else(|| self.oracle.judge(post));
        let final_json = json!({
            "label": label.as_str(),
            "confidence": (conf * 1e4).round() / 1e4,
            "explanation": format!("stub planner concluded {label} from the gathered evidence."),
        });
        Ok(format!("ACTION: finalize\nFINAL: {final_json}"))
    }
}

/// Accuracies and seed for a fully stubbed agent.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StubSettings {
    pub seed: u64,
    pub classifier_accuracy: f64,
    pub reasoner_accuracy: f64,
    pub planner_accuracy: f64,
}

impl Default for StubSettings {
    fn default() -> Self {
        Self {
            seed: 7,
            classifier_accuracy: 0.85,
            reasoner_accuracy: 0.9,
            planner_accuracy: 0.75,
        }
    }
}

/// Toolbox whose every endpoint is an in-process stub. `gold` maps post
/// text to its label for the noisy oracles.
pub fn stub_toolbox(
    settings: StubSettings,
    gold: Arc<HashMap<String, Label>>,
    posts: SharedIndex<PostPayload>,
    guidelines: SharedIndex<ChunkPayload>,
) -> Toolbox {
    let dimension = posts.read().expect("index lock poisoned").dimension();
    Toolbox {
        classifier: Arc::new(OracleClassifier(NoisyOracle::new(
            gold.clone(),
            settings.classifier_accuracy,
            settings.seed,
            "classifier",
        ))),
        embedder: Arc::new(HashingEmbedder::new(dimension)),
        posts,
        dictionary: Arc::new(StaticDictionary::demo()),
        reasoner: Arc::new(OracleReasoner(NoisyOracle::new(
            gold,
            settings.reasoner_accuracy,
            settings.seed,
            "reasoner",
        ))),
        guidelines,
        wordlist: Arc::new(default_wordlist()),
    }
}

/// Rule-following planner over the same gold labels.
pub fn stub_planner(settings: StubSettings, gold: Arc<HashMap<String, Label>>) -> StubPlanner {
    StubPlanner {
        oracle: NoisyOracle::new(gold, settings.planner_accuracy, settings.seed, "planner"),
    }
}
