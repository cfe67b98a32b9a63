//! Platform policy ingestion and retrieval.
//!
//! Markdown policy documents are split into chunks, each chunk gets a
//! model-written title and summary, and the *titles* are embedded into a
//! dedicated guideline index. Retrieval returns the summaries as citation
//! snippets; the raw chunk body stays in the index for audit.
//!
//! # Annotation exchange
//!
//! The annotation model receives [`render_annotation_prompt`]'s output and
//! must answer with two tagged lines:
//!
//! ```text
//! TITLE: <title>
//! SUMMARY: <summary, may continue on following lines>
//! ```
//!
//! Titles longer than [`MAX_TITLE_CHARS`] and summaries longer than
//! [`MAX_SUMMARY_CHARS`] are truncated.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GuidelineCitation, GuidelineSource, Timestamp};
use crate::endpoints::{Embedder, EndpointError, TextGenerator};
use crate::index::{embed, EmbedError, SharedIndex, Vector, VectorIndex};

pub const DEFAULT_MAX_CHUNK_CHARS: usize = 1500;
pub const MIN_MAX_CHUNK_CHARS: usize = 200;
pub const MAX_TITLE_CHARS: usize = 120;
pub const MAX_SUMMARY_CHARS: usize = 500;
pub const DEFAULT_CITATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidelineError {
    #[error("guideline document is empty")]
    EmptyDocument,
    #[error("max_chunk_chars must be at least {MIN_MAX_CHUNK_CHARS}, got {0}")]
    ChunkSizeTooSmall(usize),
    #[error("chunk body is empty")]
    EmptyBody,
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("malformed annotation: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("guideline index is empty")]
    EmptyIndex,
    #[error("query is empty")]
    EmptyQuery,
    #[error("index error: {0}")]
    Index(String),
    #[error("cannot read {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidelineDocument {
    pub source: GuidelineSource,
    pub url: String,
    pub markdown: String,
    pub fetched_at: Timestamp,
}

/// A slice of a document before annotation. `span` is the byte range of
/// `body` inside the document.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChunk {
    pub source: GuidelineSource,
    pub body: String,
    pub span: Range<usize>,
}

/// Stored per guideline chunk; the vector is the title embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPayload {
    pub source: GuidelineSource,
    pub title: String,
    pub summary: String,
    pub body: String,
}

pub type GuidelineIndex = VectorIndex<ChunkPayload>;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidelineChunk {
    pub chunk_id: String,
    pub source: GuidelineSource,
    pub title: String,
    pub summary: String,
    pub body: String,
    pub title_vector: Vector,
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn trim_range(doc: &str, r: Range<usize>) -> Option<Range<usize>> {
    let slice = &doc[r.clone()];
    let start = r.start + (slice.len() - slice.trim_start().len());
    let end = r.start + slice.trim_end().len();
    (start < end).then_some(start..end)
}

/// Byte ranges of the lines of `doc[r]`, newline excluded.
fn line_ranges(doc: &str, r: Range<usize>) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut pos = r.start;
    for line in doc[r.clone()].split_inclusive('\n') {
        let end = pos + line.len();
        out.push(pos..end - line.ends_with('\n') as usize);
        pos = end;
    }
    out
}

#[derive(Clone, Copy)]
enum Level {
    Paragraph,
    Line,
    Word,
}

/// Splits `doc[r]` into trimmed, non-empty units at the given granularity.
fn units(doc: &str, r: Range<usize>, level: Level) -> Vec<Range<usize>> {
    let raw: Vec<Range<usize>> = match level {
        Level::Paragraph => {
            let mut paras = Vec::new();
            let mut cur: Option<Range<usize>> = None;
            for l in line_ranges(doc, r) {
                if doc[l.clone()].trim().is_empty() {
                    paras.extend(cur.take());
                } else {
                    cur = Some(cur.map_or(l.clone(), |c| c.start..l.end));
                }
            }
            paras.extend(cur);
            paras
        }
        Level::Line => line_ranges(doc, r),
        Level::Word => {
            let mut words = Vec::new();
            let mut start = None;
            for (i, c) in doc[r.clone()].char_indices() {
                let at = r.start + i;
                match (c.is_whitespace(), start) {
                    (true, Some(s)) => {
                        words.push(s..at);
                        start = None;
                    }
                    (false, None) => start = Some(at),
                    _ => {}
                }
            }
            if let Some(s) = start {
                words.push(s..r.end);
            }
            words
        }
    };
    raw.into_iter().filter_map(|u| trim_range(doc, u)).collect()
}

/// Hard split into pieces of at most `max` characters.
fn hard_split(doc: &str, r: Range<usize>, max: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = r.start;
    let mut count = 0;
    for (i, _) in doc[r.clone()].char_indices() {
        if count == max {
            out.push(start..r.start + i);
            start = r.start + i;
            count = 0;
        }
        count += 1;
    }
    if start < r.end {
        out.push(start..r.end);
    }
    out
}

/// Splits an oversized range into ranges of at most `max` characters,
/// preferring paragraph, then line, then word boundaries.
fn split_oversized(
    doc: &str,
    r: Range<usize>,
    max: usize,
    level: Option<Level>,
) -> Vec<Range<usize>> {
    if char_len(&doc[r.clone()]) <= max {
        return vec![r];
    }
    let Some(level) = level else {
        return hard_split(doc, r, max);
    };
    let next = match level {
        Level::Paragraph => Some(Level::Line),
        Level::Line => Some(Level::Word),
        Level::Word => None,
    };
    let pieces: Vec<Range<usize>> = units(doc, r, level)
        .into_iter()
        .flat_map(|u| split_oversized(doc, u, max, next))
        .collect();
    pack(doc, pieces, max)
}

/// Greedily merges consecutive ranges (with the text between them) while
/// the merged span stays within `max` characters.
fn pack(doc: &str, pieces: Vec<Range<usize>>, max: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for p in pieces {
        match out.last_mut() {
            Some(cur) if char_len(&doc[cur.start..p.end]) <= max => cur.end = p.end,
            _ => out.push(p),
        }
    }
    out
}

/// Splits a policy document into chunks of at most `max_chunk_chars`.
///
/// Sections start at lines beginning with `#`; each section is one chunk
/// unless it is too long, in which case it is split at paragraph (then line,
/// then word) boundaries. Chunks are trimmed slices of the document in
/// order, so only whitespace is lost between them.
pub fn chunk_markdown(
    doc: &GuidelineDocument,
    max_chunk_chars: usize,
) -> Result<Vec<RawChunk>, GuidelineError> {
    if max_chunk_chars < MIN_MAX_CHUNK_CHARS {
        return Err(GuidelineError::ChunkSizeTooSmall(max_chunk_chars));
    }
    let md = doc.markdown.as_str();
    if md.trim().is_empty() {
        return Err(GuidelineError::EmptyDocument);
    }
    let mut section_starts = vec![0];
    for l in line_ranges(md, 0..md.len()) {
        if l.start > 0 && md[l.clone()].starts_with('#') {
            section_starts.push(l.start);
        }
    }
    section_starts.push(md.len());
    let chunks = section_starts
        .windows(2)
        .filter_map(|w| trim_range(md, w[0]..w[1]))
        .flat_map(|s| split_oversized(md, s, max_chunk_chars, Some(Level::Paragraph)))
        .map(|span| RawChunk {
            source: doc.source,
            body: md[span.clone()].to_string(),
            span,
        })
        .collect();
    Ok(chunks)
}

pub fn render_annotation_prompt(body: &str) -> String {
    format!(
        "You are annotating a passage from a platform's hate speech policy.\n\
         Write a short title (at most {MAX_TITLE_CHARS} characters) and a one or two sentence summary of the passage.\n\
         \n\
         PASSAGE:\n<<<\n{body}\n>>>\n\
         \n\
         Respond with exactly two lines:\n\
         TITLE: <title>\n\
         SUMMARY: <summary>\n"
    )
}

fn truncate_chars(s: &str, max: usize) -> String {
    s.chars()
        .take(max)
        .collect::<String>()
        .trim_end()
        .to_string()
}

fn tag_value<'a>(line: &'a str, tag: &str) -> Option<&'a str> {
    let t = line.trim_start();
    (t.len() >= tag.len() && t[..tag.len()].eq_ignore_ascii_case(tag))
        .then(|| t[tag.len()..].trim())
}

/// Parses a `TITLE:` / `SUMMARY:` response, applying the length caps.
pub fn parse_annotation(text: &str) -> Result<(String, String), GuidelineError> {
    let lines: Vec<&str> = text.lines().collect();
    let title = lines
        .iter()
        .find_map(|l| tag_value(l, "TITLE:"))
        .filter(|t| !t.is_empty())
        .ok_or_else(|| GuidelineError::MalformedResponse("missing TITLE line".into()))?;
    let at = lines
        .iter()
        .position(|l| tag_value(l, "SUMMARY:").is_some())
        .ok_or_else(|| GuidelineError::MalformedResponse("missing SUMMARY line".into()))?;
    let mut summary = tag_value(lines[at], "SUMMARY:")
        .unwrap_or_default()
        .to_string();
    for l in lines[at + 1..]
        .iter()
        .take_while(|l| tag_value(l, "TITLE:").is_none())
    {
        summary.push(' ');
        summary.push_str(l.trim());
    }
    let summary = summary.trim();
    if summary.is_empty() {
        return Err(GuidelineError::MalformedResponse("empty SUMMARY".into()));
    }
    Ok((
        truncate_chars(title, MAX_TITLE_CHARS),
        truncate_chars(summary, MAX_SUMMARY_CHARS),
    ))
}

/// Asks the annotation model for a title and summary of one chunk.
pub fn annotate_chunk(
    generator: &dyn TextGenerator,
    body: &str,
) -> Result<(String, String), GuidelineError> {
    if body.trim().is_empty() {
        return Err(GuidelineError::EmptyBody);
    }
    parse_annotation(&generator.generate(&render_annotation_prompt(body))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkFailure {
    pub chunk_id: String,
    pub error: GuidelineError,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuidelineIngestReport {
    pub indexed: usize,
    pub chunk_ids: Vec<String>,
    pub failures: Vec<ChunkFailure>,
}

/// Chunks, annotates and embeds every document into `index`. Failures are
/// recorded per chunk (or per document, when it cannot be chunked).
pub fn ingest_guidelines(
    index: &mut GuidelineIndex,
    annotator: &dyn TextGenerator,
    embedder: &dyn Embedder,
    docs: &[GuidelineDocument],
    max_chunk_chars: usize,
) -> GuidelineIngestReport {
    let mut report = GuidelineIngestReport::default();
    for doc in docs {
        let chunks = match chunk_markdown(doc, max_chunk_chars) {
            Ok(c) => c,
            Err(error) => {
                report.failures.push(ChunkFailure {
                    chunk_id: format!("{}-*", doc.source),
                    error,
                });
                continue;
            }
        };
        for (n, chunk) in chunks.into_iter().enumerate() {
            let mut chunk_id = format!("{}-{n:03}", doc.source);
            if index.contains(&chunk_id) {
                chunk_id = index.next_id(&format!("{}-", doc.source));
            }
            let result = annotate_chunk(annotator, &chunk.body).and_then(|(title, summary)| {
                let vector = embed(embedder, &title, index.dimension())?;
                index
                    .upsert(
                        chunk_id.clone(),
                        vector,
                        ChunkPayload {
                            source: chunk.source,
                            title,
                            summary,
                            body: chunk.body,
                        },
                    )
                    .map_err(|e| GuidelineError::Index(e.to_string()))
            });
            match result {
                Ok(id) => {
                    report.indexed += 1;
                    report.chunk_ids.push(id);
                }
                Err(error) => report.failures.push(ChunkFailure { chunk_id, error }),
            }
        }
    }
    report
}

/// Nearest guideline chunks to `query` by title embedding, as citations.
pub fn retrieve_guidelines(
    index: &SharedIndex<ChunkPayload>,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
) -> Result<Vec<GuidelineCitation>, GuidelineError> {
    if query.trim().is_empty() {
        return Err(GuidelineError::EmptyQuery);
    }
    let guard = index.read().expect("guideline index lock poisoned");
    if guard.is_empty() {
        return Err(GuidelineError::EmptyIndex);
    }
    let q = embed(embedder, query, guard.dimension())?;
    let hits = guard
        .top_k(&q, k.max(1))
        .map_err(|e| GuidelineError::Index(e.to_string()))?;
    Ok(hits
        .into_iter()
        .map(|h| GuidelineCitation {
            source: h.record.payload.source,
            title: h.record.payload.title.clone(),
            snippet: h.record.payload.summary.clone(),
        })
        .collect())
}

/// Loads `<source>.md` (with optional `<source>.meta` holding
/// `url=<original url>`) for every known source present in `dir`.
pub fn load_guideline_dir(dir: &Path) -> Result<Vec<GuidelineDocument>, GuidelineError> {
    let io = |path: &Path, e: std::io::Error| GuidelineError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    if !dir.is_dir() {
        return Err(io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut docs = Vec::new();
    for source in GuidelineSource::ALL {
        let md_path = dir.join(format!("{source}.md"));
        if !md_path.exists() {
            continue;
        }
        let markdown = fs::read_to_string(&md_path).map_err(|e| io(&md_path, e))?;
        let meta_path = dir.join(format!("{source}.meta"));
        let url = match fs::read_to_string(&meta_path) {
            Ok(meta) => meta
                .lines()
                .find_map(|l| l.trim().strip_prefix("url="))
                .unwrap_or_default()
                .trim()
                .to_string(),
            Err(_) => String::new(),
        };
        let fetched_at = fs::metadata(&md_path)
            .and_then(|m| m.modified())
            .ok()
            .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
            .map(|d| Timestamp::from_micros(d.as_micros() as i64))
            .unwrap_or(Timestamp::from_micros(0));
        docs.push(GuidelineDocument {
            source,
            url,
            markdown,
            fetched_at,
        });
    }
    Ok(docs)
}
