//! Moderator feedback: verdicts on decisions become new labelled examples
//! in the post index, and every verdict is kept in an append-only log.
//!
//! Writes go to the index first and then to the log. On open, index
//! records created by feedback whose id never reached the log are removed,
//! so an interrupted write leaves neither side visible.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{AgentDecision, Label, Timestamp};
use crate::endpoints::Embedder;
use crate::index::{embed, EmbedError, IndexError, PostPayload, Provenance, SharedIndex};
use crate::trace::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Confirmed,
    Rejected,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Confirmed => "confirmed",
            Verdict::Rejected => "rejected",
        }
    }
}

impl std::str::FromStr for Verdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "confirmed" | "confirm" => Ok(Verdict::Confirmed),
            "rejected" | "reject" | "flagged" | "flag" => Ok(Verdict::Rejected),
            other => Err(format!(
                "unknown verdict {other:?} (expected confirmed or rejected)"
            )),
        }
    }
}

/// Label to store for a verdict on a prediction.
pub fn stored_label(predicted: Label, verdict: Verdict) -> Label {
    match verdict {
        Verdict::Confirmed => predicted,
        Verdict::Rejected => predicted.negate(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    pub post_text: String,
    pub predicted_label: Label,
    pub verdict: Verdict,
    pub stored_label: Label,
    pub created_at: Timestamp,
    /// Digest of the decision the verdict was given on.
    pub decision_digest: String,
}

/// Stable digest of a decision's canonical JSON.
pub fn decision_digest(decision: &AgentDecision) -> String {
    let canonical = decision.to_value().to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("post text is empty")]
    EmptyText,
    #[error("feedback for this post and decision was already recorded as {0}")]
    DuplicateFeedback(String),
    #[error("could not embed post: {0}")]
    Embed(#[from] EmbedError),
    #[error("index write failed, feedback not recorded: {0}")]
    IndexWriteFailure(String),
    #[error("feedback log {path}: {detail}")]
    Log { path: PathBuf, detail: String },
    #[error("store is unusable after an interrupted write; reopen it")]
    Interrupted,
}

impl From<IndexError> for FeedbackError {
    fn from(e: IndexError) -> Self {
        FeedbackError::IndexWriteFailure(e.to_string())
    }
}

#[derive(Default)]
struct State {
    records: Vec<FeedbackRecord>,
    keys: HashSet<(String, String)>,
    poisoned: bool,
}

/// Feedback log plus the post index it expands. Writes are serialized;
/// reads of the index stay concurrent.
pub struct FeedbackStore {
    index: SharedIndex<PostPayload>,
    embedder: Arc<dyn Embedder>,
    clock: Arc<dyn Clock>,
    log_path: Option<PathBuf>,
    state: Mutex<State>,
    crash_after_index_write: AtomicBool,
}

fn log_err(path: &Path, e: impl std::fmt::Display) -> FeedbackError {
    FeedbackError::Log {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Reads committed log lines. A torn final line (no trailing newline, not
/// valid JSON) is dropped and truncated away.
fn read_log(path: &Path) -> Result<Vec<FeedbackRecord>, FeedbackError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| log_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut committed = 0u64;
    let mut line = String::new();
    let mut lineno = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| log_err(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            break;
        }
        if !line.trim().is_empty() {
            let record: FeedbackRecord = serde_json::from_str(line.trim())
                .map_err(|e| log_err(path, format!("line {lineno}: {e}")))?;
            records.push(record);
        }
        committed += n as u64;
    }
    let len = std::fs::metadata(path).map_err(|e| log_err(path, e))?.len();
    if len > committed {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| log_err(path, e))?;
        f.set_len(committed).map_err(|e| log_err(path, e))?;
        f.sync_all().map_err(|e| log_err(path, e))?;
    }
    Ok(records)
}

impl FeedbackStore {
    /// In-memory store (no log file).
    pub fn in_memory(
        index: SharedIndex<PostPayload>,
        embedder: Arc<dyn Embedder>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            index,
            embedder,
            clock,
            log_path: None,
            state: Mutex::new(State::default()),
            crash_after_index_write: AtomicBool::new(false),
        }
    }

    /// Opens the log at `log_path` and reconciles the index against it.
    pub fn open(
        index: SharedIndex<PostPayload>,
        embedder: Arc<dyn Embedder>,
        clock: Arc<dyn Clock>,
        log_path: &Path,
    ) -> Result<Self, FeedbackError> {
        let records = read_log(log_path)?;
        let logged: HashSet<&str> = records.iter().map(|r| r.feedback_id.as_str()).collect();
        {
            let mut idx = index.write().expect("index lock poisoned");
            let orphans: Vec<String> = idx
                .records()
                .iter()
                .filter(|r| r.payload.provenance == Provenance::Feedback)
                .filter(|r| {
                    r.payload
                        .feedback_id
                        .as_deref()
                        .is_none_or(|id| !logged.contains(id))
                })
                .map(|r| r.record_id.clone())
                .collect();
            if !orphans.is_empty() {
                idx.remove(&orphans)?;
            }
        }
        let keys = records
            .iter()
            .map(|r| (r.post_text.clone(), r.decision_digest.clone()))
            .collect();
        Ok(Self {
            index,
            embedder,
            clock,
            log_path: Some(log_path.to_path_buf()),
            state: Mutex::new(State {
                records,
                keys,
                poisoned: false,
            }),
            crash_after_index_write: AtomicBool::new(false),
        })
    }

    pub fn index(&self) -> &SharedIndex<PostPayload> {
        &self.index
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    /// Test hook: the next write stops right after the index write, as if
    /// the process died before the log line was appended.
    pub fn inject_crash_after_index_write(&self) {
        self.crash_after_index_write.store(true, Ordering::SeqCst);
    }

    pub fn apply_feedback(
        &self,
        decision: &AgentDecision,
        post_text: &str,
        verdict: Verdict,
    ) -> Result<FeedbackRecord, FeedbackError> {
        if post_text.trim().is_empty() {
            return Err(FeedbackError::EmptyText);
        }
        let digest = decision_digest(decision);
        let key = (post_text.to_string(), digest.clone());
        let mut state = self.state.lock().expect("feedback lock poisoned");
        if state.poisoned {
            return Err(FeedbackError::Interrupted);
        }
        if let Some(prev) = state
            .records
            .iter()
            .find(|r| r.post_text == key.0 && r.decision_digest == key.1)
        {
            return Err(FeedbackError::DuplicateFeedback(prev.feedback_id.clone()));
        }
        let dimension = self.index.read().expect("index lock poisoned").dimension();
        let vector = embed(self.embedder.as_ref(), post_text, dimension)?;
        let stored = stored_label(decision.label, verdict);

        let mut idx = self.index.write().expect("index lock poisoned");
        let feedback_id = idx.next_id("feedback-");
        let record = FeedbackRecord {
            feedback_id: feedback_id.clone(),
            post_text: post_text.to_string(),
            predicted_label: decision.label,
            verdict,
            stored_label: stored,
            created_at: self.clock.now(),
            decision_digest: digest,
        };
        idx.upsert(
            feedback_id.clone(),
            vector,
            PostPayload {
                text: post_text.to_string(),
                label: stored,
                provenance: Provenance::Feedback,
                feedback_id: Some(feedback_id.clone()),
            },
        )?;
        if self.crash_after_index_write.swap(false, Ordering::SeqCst) {
            state.poisoned = true;
            return Err(FeedbackError::Interrupted);
        }
        if let Some(path) = &self.log_path {
            if let Err(e) = append_line(path, &record) {
                // Keep the two sides consistent: undo the index write.
                if idx.remove(std::slice::from_ref(&feedback_id)).is_err() {
                    state.poisoned = true;
                }
                return Err(e);
            }
        }
        drop(idx);
        state.keys.insert(key);
        state.records.push(record.clone());
        Ok(record)
    }

    /// Records in creation order, optionally only one verdict.
    pub fn list_feedback(&self, filter: Option<Verdict>) -> Vec<FeedbackRecord> {
        let state = self.state.lock().expect("feedback lock poisoned");
        state
            .records
            .iter()
            .filter(|r| filter.is_none_or(|v| r.verdict == v))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.state
            .lock()
            .expect("feedback lock poisoned")
            .records
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn append_line(path: &Path, record: &FeedbackRecord) -> Result<(), FeedbackError> {
    let mut line = serde_json::to_string(record).map_err(|e| log_err(path, e))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| log_err(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| log_err(path, e))?;
    f.sync_data().map_err(|e| log_err(path, e))
}
