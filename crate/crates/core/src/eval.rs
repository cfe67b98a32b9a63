//! Evaluation: F1 metrics, corpus runs, tool ablations and tool usage
//! statistics, with results persisted to a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{Agent, AgentConfig};
use crate::domain::{AgentDecision, Label, Post, ToolKind, ToolTraceEvent};
use crate::index::{read_corpus, CorpusRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("corpus line {line}: {detail}")]
    Corpus { line: usize, detail: String },
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Binary classification metrics. `confusion[gold][pred]` with index 0 for
/// hate and 1 for not_hate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// F1 of the hate class.
    pub f1: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub confusion: [[u64; 2]; 2],
    pub n: u64,
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Hate => 0,
        Label::NotHate => 1,
    }
}

/// F1 for one class from its confusion counts. A class absent from both
/// gold and predictions is reported as `None`; one with no support or no
/// predictions scores 0.
fn class_f1(tp: u64, fp: u64, fneg: u64) -> Option<f64> {
    if tp + fp + fneg == 0 {
        return None;
    }
    if tp == 0 {
        return Some(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Some(2.0 * precision * recall / (precision + recall))
}

pub fn f1_scores(gold: &[Label], pred: &[Label]) -> Result<EvalResult, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut confusion = [[0u64; 2]; 2];
    for (g, p) in gold.iter().zip(pred) {
        confusion[class_index(*g)][class_index(*p)] += 1;
    }
    let n = gold.len() as u64;
    let per_class: Vec<Option<f64>> = (0..2)
        .map(|c| {
            let o = 1 - c;
            class_f1(confusion[c][c], confusion[o][c], confusion[c][o])
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let correct = confusion[0][0] + confusion[1][1];
    Ok(EvalResult {
        f1: per_class[0].unwrap_or(1.0),
        f1_micro: correct as f64 / n as f64,
        f1_macro: present.iter().sum::<f64>() / present.len() as f64,
        confusion,
        n,
    })
}

/// A post with its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPost {
    pub post: Post,
    pub gold: Label,
}

impl From<CorpusRecord> for LabeledPost {
    fn from(r: CorpusRecord) -> Self {
        LabeledPost {
            post: Post {
                id: r.source_id,
                text: r.text,
                platform: None,
            },
            gold: r.label,
        }
    }
}

/// Reads a TSV corpus for evaluation; any malformed line is an error.
pub fn load_eval_corpus(path: &Path) -> Result<Vec<LabeledPost>, EvalError> {
    let lines = read_corpus(path).map_err(|e| io_err(path, e))?;
    lines
        .into_iter()
        .map(|r| {
            r.map(LabeledPost::from).map_err(|e| EvalError::Corpus {
                line: e.line(),
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolUsage {
    pub invocation_rate: f64,
    pub invocations: u64,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub p95_seconds: f64,
}

/// Per-tool usage over a set of runs. Durations are wall-clock around the
/// whole tool call, network time included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolStats {
    pub posts: u64,
    pub tools: BTreeMap<ToolKind, ToolUsage>,
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
    }
}

/// Nearest-rank percentile.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn tool_stats(traces: &[Vec<ToolTraceEvent>]) -> Result<ToolStats, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let posts = traces.len() as u64;
    let mut tools = BTreeMap::new();
    for tool in ToolKind::ALL {
        let used = traces
            .iter()
            .filter(|t| t.iter().any(|e| e.tool == tool))
            .count();
        let mut durations: Vec<f64> = traces
            .iter()
            .flatten()
            .filter(|e| e.tool == tool)
            .map(|e| e.duration)
            .collect();
        durations.sort_by(f64::total_cmp);
        let mean = if durations.is_empty() {
            0.0
        } else {
            durations.iter().sum::<f64>() / durations.len() as f64
        };
        tools.insert(
            tool,
            ToolUsage {
                invocation_rate: used as f64 / posts as f64,
                invocations: durations.len() as u64,
                mean_seconds: mean,
                median_seconds: median(&durations),
                p95_seconds: percentile(&durations, 0.95),
            },
        );
    }
    Ok(ToolStats { posts, tools })
}

/// Outcome for one evaluated post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostOutcome {
    pub post_id: String,
    pub gold: Label,
    pub predicted: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<AgentDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub result: EvalResult,
    pub stats: ToolStats,
    pub outcomes: Vec<PostOutcome>,
    pub errors: u64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// 0 or 1 evaluates sequentially, which keeps trace order reproducible.
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
}

fn evaluate_one(agent: &Agent, item: &LabeledPost, config: &AgentConfig) -> PostOutcome {
    match agent.run(&item.post, config) {
        Ok(d) => PostOutcome {
            post_id: item.post.id.clone(),
            gold: item.gold,
            predicted: d.label,
            error: None,
            decision: Some(d),
        },
        Err(e) => PostOutcome {
            post_id: item.post.id.clone(),
            gold: item.gold,
            predicted: Label::NotHate,
            error: Some(e.to_string()),
            decision: None,
        },
    }
}

/// Decides every post and scores the predictions. Failed posts count as
/// not_hate and are flagged.
pub fn run_eval(
    agent: &Agent,
    corpus: &[LabeledPost],
    config: &AgentConfig,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let outcomes: Vec<PostOutcome> = if options.workers <= 1 {
        corpus
            .iter()
            .map(|p| evaluate_one(agent, p, config))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<PostOutcome>>> = Mutex::new(vec![None; corpus.len()]);
        std::thread::scope(|s| {
            for _ in 0..options.workers.min(corpus.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(item) = corpus.get(i) else { break };
                    let outcome = evaluate_one(agent, item, config);
                    slots.lock().expect("slots lock poisoned")[i] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .expect("slots lock poisoned")
            .into_iter()
            .map(|o| o.expect("every post evaluated"))
            .collect()
    };
    let gold: Vec<Label> = outcomes.iter().map(|o| o.gold).collect();
    let pred: Vec<Label> = outcomes.iter().map(|o| o.predicted).collect();
    let result = f1_scores(&gold, &pred)?;
    let traces: Vec<Vec<ToolTraceEvent>> = outcomes
        .iter()
        .map(|o| {
            o.decision
                .as_ref()
                .map(|d| d.trace.clone())
                .unwrap_or_default()
        })
        .collect();
    let stats = tool_stats(&traces)?;
    let errors = outcomes.iter().filter(|o| o.error.is_some()).count() as u64;
    let report = EvalReport {
        result,
        stats,
        outcomes,
        errors,
    };
    if let Some(dir) = &options.out_dir {
        write_run_dir(dir, config, &report, "agent")?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_name: String,
    pub disabled_tool: Option<ToolKind>,
    pub result: EvalResult,
    pub errors: u64,
    pub stats: ToolStats,
}

/// The six ablation configurations: all tools, no tools, and each of the
/// four evidence tools removed. Guidelines are never ablated.
pub fn ablation_configs(base: &AgentConfig) -> Vec<(String, Option<ToolKind>, AgentConfig)> {
    let full = base.clone().with_tools(ToolKind::ALL);
    let mut out = vec![
        ("all tools".to_string(), None, full.clone()),
        ("no tools".to_string(), None, base.clone().with_tools([])),
    ];
    for (name, tool) in [
        ("w/o classifier", ToolKind::Classifier),
        ("w/o similar posts", ToolKind::SimilarPosts),
        ("w/o slang dictionary", ToolKind::SlangDictionary),
        ("w/o reasoning", ToolKind::Reasoning),
    ] {
        out.push((name.to_string(), Some(tool), full.clone().without(tool)));
    }
    out
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .replace("__", "_")
}

pub fn run_ablation(
    agent: &Agent,
    corpus: &[LabeledPost],
    base: &AgentConfig,
    options: &EvalOptions,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::new();
    for (name, disabled, config) in ablation_configs(base) {
        let opts = EvalOptions {
            workers: options.workers,
            out_dir: options.out_dir.as_ref().map(|d| d.join(slug(&name))),
        };
        let report = run_eval(agent, corpus, &config, &opts)?;
        rows.push(AblationRow {
            config_name: name,
            disabled_tool: disabled,
            result: report.result,
            errors: report.errors,
            stats: report.stats,
        });
    }
    if let Some(dir) = &options.out_dir {
        let table: Vec<(&str, &EvalResult, u64)> = rows
            .iter()
            .map(|r| (r.config_name.as_str(), &r.result, r.errors))
            .collect();
        write_file(&dir.join("summary.txt"), &render_summary(&table))?;
        let json = serde_json::to_string_pretty(&rows).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join("ablation.json"), &(json + "\n"))?;
    }
    Ok(rows)
}

/// Plain-text results table with F1, F1_MICRO and F1_MACRO columns.
pub fn render_summary(rows: &[(&str, &EvalResult, u64)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>6}  {:>8}  {:>8}  {:>5}  {:>6}",
        "CONFIG", "F1", "F1_MICRO", "F1_MACRO", "N", "ERRORS"
    );
    for (name, r, errors) in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.4}  {:>8.4}  {:>8.4}  {:>5}  {:>6}",
            name, r.f1, r.f1_micro, r.f1_macro, r.n, errors
        );
    }
    s
}

/// Per-tool usage table: invocation rate and duration summary.
pub fn render_tool_stats(stats: &ToolStats) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16}  {:>6}  {:>6}  {:>9}  {:>9}  {:>9}",
        "TOOL", "RATE", "CALLS", "MEAN_S", "MEDIAN_S", "P95_S"
    );
    for (tool, u) in &stats.tools {
        let _ = writeln!(
            s,
            "{:<16}  {:>6.3}  {:>6}  {:>9.4}  {:>9.4}  {:>9.4}",
            tool.as_str(),
            u.invocation_rate,
            u.invocations,
            u.mean_seconds,
            u.median_seconds,
            u.p95_seconds
        );
    }
    s.push_str("durations are wall-clock seconds around each tool call, network included\n");
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), EvalError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Writes `config.json`, `decisions.jsonl`, `metrics.json`, `stats.json`
/// and `summary.txt` into `dir`.
pub fn write_run_dir(
    dir: &Path,
    config: &AgentConfig,
    report: &EvalReport,
    name: &str,
) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let pretty =
        |v: serde_json::Value| serde_json::to_string_pretty(&v).expect("json renders") + "\n";
    write_file(&dir.join("config.json"), &pretty(json!(config)))?;
    let mut lines = String::new();
    for o in &report.outcomes {
        lines.push_str(&serde_json::to_string(o).map_err(|e| io_err(dir, e))?);
        lines.push('\n');
    }
    write_file(&dir.join("decisions.jsonl"), &lines)?;
    let mut metrics = json!(report.result);
    metrics["errors"] = json!(report.errors);
    write_file(&dir.join("metrics.json"), &pretty(metrics))?;
    write_file(&dir.join("stats.json"), &pretty(json!(report.stats)))?;
    let summary = format!(
        "{}\n{}",
        render_summary(&[(name, &report.result, report.errors)]),
        render_tool_stats(&report.stats)
    );
    write_file(&dir.join("summary.txt"), &summary)
}
