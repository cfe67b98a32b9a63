//! Exact nearest-neighbour index over embedded records, with an embedding
//! helper and an append-only on-disk format.
//!
//! # File format
//!
//! ```text
//! {"format":"modagent-index/1","dimension":1024,"count":2,"checksum":"<sha256 hex>"}<spaces>\n
//! {"record_id":"post-00000000", ..payload fields.., "vector":"<base64 LE f32>"}\n
//! {"record_id":"post-00000001", ..}\n
//! ```
//!
//! The header line is padded to a fixed [`HEADER_WIDTH`] so it can be
//! rewritten in place after every append. `count` and `checksum` (SHA-256
//! over the committed record lines, newline included) are the commit point:
//! bytes after the last committed record are ignored on load and truncated
//! when the file is reopened for writing.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::Label;
use crate::endpoints::{Embedder, EndpointError};

pub const DEFAULT_DIMENSION: usize = 1024;
pub const DEFAULT_TOP_K: usize = 5;
pub const HEADER_WIDTH: usize = 192;
const FORMAT_TAG: &str = "modagent-index/1";
const EMBED_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vector contains non-finite components")]
    NonFinite,
    #[error("query vector is empty or zero")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt index file {path}: {detail}")]
    CorruptIndexFile { path: PathBuf, detail: String },
}

impl IndexError {
    fn io(path: &Path, source: io::Error) -> Self {
        IndexError::IoFailure {
            path: path.to_path_buf(),
            source,
        }
    }

    fn corrupt(path: &Path, detail: impl Into<String>) -> Self {
        IndexError::CorruptIndexFile {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("embedding endpoint returned {got} components, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding endpoint returned a zero or non-finite vector")]
    Degenerate,
}

/// Fixed-length embedding with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(components: Vec<f32>) -> Result<Self, IndexError> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(Self(components))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&c| c as f64 * c as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales to unit length. Vectors already within `f32::EPSILON` of unit
    /// length are returned unchanged so normalization is idempotent.
    pub fn normalized(self) -> Result<Self, IndexError> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        if (norm - 1.0).abs() <= f32::EPSILON as f64 {
            return Ok(self);
        }
        Ok(Self(
            self.0
                .into_iter()
                .map(|c| (c as f64 / norm) as f32)
                .collect(),
        ))
    }

    fn to_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.0.len() * 4);
        for c in &self.0 {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        BASE64.encode(bytes)
    }

    fn from_base64(s: &str) -> Option<Self> {
        let bytes = BASE64.decode(s).ok()?;
        if bytes.len() % 4 != 0 {
            return None;
        }
        let comps = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Vector::new(comps).ok()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `dot(a, b) / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64, IndexError> {
    if a.dimension() != b.dimension() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dimension(),
            got: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Embeds one text and L2-normalizes the result.
pub fn embed(embedder: &dyn Embedder, text: &str, dimension: usize) -> Result<Vector, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut out = embed_many(embedder, &[text], dimension)?;
    Ok(out.pop().expect("one vector per text"))
}

fn embed_many(
    embedder: &dyn Embedder,
    texts: &[&str],
    dimension: usize,
) -> Result<Vec<Vector>, EmbedError> {
    let raw = embedder.embed_batch(texts)?;
    if raw.len() != texts.len() {
        return Err(EmbedError::Endpoint(EndpointError::malformed(
            "embedder",
            format!("asked for {} vectors, got {}", texts.len(), raw.len()),
        )));
    }
    raw.into_iter()
        .map(|v| {
            if v.len() != dimension {
                return Err(EmbedError::DimensionMismatch {
                    expected: dimension,
                    got: v.len(),
                });
            }
            Vector::new(v)
                .and_then(Vector::normalized)
                .map_err(|_| EmbedError::Degenerate)
        })
        .collect()
}

/// A stored record: id, unit-length vector and caller payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Record<P> {
    pub record_id: String,
    pub vector: Vector,
    pub payload: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a, P> {
    pub record: &'a Record<P>,
    pub score: f64,
}

#[derive(Serialize)]
struct DiskRecordRef<'a, P> {
    record_id: &'a str,
    #[serde(flatten)]
    payload: &'a P,
    vector: String,
}

#[derive(Deserialize)]
struct DiskRecord<P> {
    record_id: String,
    #[serde(flatten)]
    payload: P,
    vector: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    dimension: usize,
    count: usize,
    checksum: String,
}

fn render_header(dimension: usize, count: usize, hasher: &Sha256) -> Vec<u8> {
    let header = Header {
        format: FORMAT_TAG.into(),
        dimension,
        count,
        checksum: hex::encode(hasher.clone().finalize()),
    };
    let mut line = serde_json::to_vec(&header).expect("header serializes");
    debug_assert!(line.len() < HEADER_WIDTH);
    line.resize(HEADER_WIDTH, b' ');
    line.push(b'\n');
    line
}

fn render_record<P: Serialize>(record: &Record<P>) -> Vec<u8> {
    let mut line = serde_json::to_vec(&DiskRecordRef {
        record_id: &record.record_id,
        payload: &record.payload,
        vector: record.vector.to_base64(),
    })
    .expect("record serializes");
    line.push(b'\n');
    line
}

/// Durable append target for an index opened with [`VectorIndex::open`].
#[derive(Debug)]
struct AppendLog {
    path: PathBuf,
    file: File,
    hasher: Sha256,
    committed_len: u64,
}

impl AppendLog {
    fn append(&mut self, dimension: usize, count: usize, line: &[u8]) -> Result<(), IndexError> {
        let path = self.path.clone();
        let io = |e| IndexError::io(&path, e);
        self.file
            .seek(SeekFrom::Start(self.committed_len))
            .map_err(io)?;
        self.file.write_all(line).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        let mut hasher = self.hasher.clone();
        hasher.update(line);
        // Header rewrite is the commit point.
        self.file.seek(SeekFrom::Start(0)).map_err(io)?;
        self.file
            .write_all(&render_header(dimension, count, &hasher))
            .map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.hasher = hasher;
        self.committed_len += line.len() as u64;
        Ok(())
    }
}

/// In-process exact cosine index.
///
/// Not internally synchronized; share through [`SharedIndex`] so writers
/// hold the write lock and readers always see whole records.
#[derive(Debug)]
pub struct VectorIndex<P> {
    dimension: usize,
    records: Vec<Record<P>>,
    positions: HashMap<String, usize>,
    log: Option<AppendLog>,
}

pub type SharedIndex<P> = Arc<RwLock<VectorIndex<P>>>;

impl<P> VectorIndex<P>
where
    P: Serialize + DeserializeOwned + Clone,
{
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            records: Vec::new(),
            positions: HashMap::new(),
            log: None,
        }
    }

    pub fn into_shared(self) -> SharedIndex<P> {
        Arc::new(RwLock::new(self))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record<P>] {
        &self.records
    }

    pub fn get(&self, record_id: &str) -> Option<&Record<P>> {
        self.positions.get(record_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, record_id: &str) -> bool {
        self.positions.contains_key(record_id)
    }

    pub fn path(&self) -> Option<&Path> {
        self.log.as_ref().map(|l| l.path.as_path())
    }

    /// First unused id of the form `{prefix}{n:08}`.
    pub fn next_id(&self, prefix: &str) -> String {
        let mut n = self.records.len();
        loop {
            let id = format!("{prefix}{n:08}");
            if !self.contains(&id) {
                return id;
            }
            n += 1;
        }
    }

    /// Inserts a record, normalizing its vector. When the index is backed
    /// by a file the record is durable when this returns.
    pub fn upsert(
        &mut self,
        record_id: impl Into<String>,
        vector: Vector,
        payload: P,
    ) -> Result<String, IndexError> {
        let record_id = record_id.into();
        if vector.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: vector.dimension(),
            });
        }
        if self.contains(&record_id) {
            return Err(IndexError::DuplicateId(record_id));
        }
        let record = Record {
            record_id: record_id.clone(),
            vector: vector.normalized()?,
            payload,
        };
        if let Some(log) = self.log.as_mut() {
            log.append(
                self.dimension,
                self.records.len() + 1,
                &render_record(&record),
            )?;
        }
        self.positions.insert(record_id.clone(), self.records.len());
        self.records.push(record);
        Ok(record_id)
    }

    /// Removes records and, for a file-backed index, rewrites the file.
    /// Returns how many were removed.
    pub fn remove(&mut self, record_ids: &[String]) -> Result<usize, IndexError> {
        let before = self.records.len();
        self.records.retain(|r| !record_ids.contains(&r.record_id));
        let removed = before - self.records.len();
        if removed == 0 {
            return Ok(0);
        }
        self.positions = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.record_id.clone(), i))
            .collect();
        if let Some(path) = self.path().map(Path::to_path_buf) {
            self.log = None;
            self.save(&path)?;
            self.attach(&path)?;
        }
        Ok(removed)
    }

    /// The `k` best records by cosine similarity, descending; equal scores
    /// are ordered by ascending `record_id`.
    pub fn top_k(&self, query: &Vector, k: usize) -> Result<Vec<Hit<'_, P>>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dimension() == 0 {
            return Err(IndexError::EmptyQuery);
        }
        if query.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: query.dimension(),
            });
        }
        let qnorm = query.norm();
        if qnorm == 0.0 {
            return Err(IndexError::EmptyQuery);
        }
        let mut hits: Vec<Hit<'_, P>> = self
            .records
            .iter()
            .map(|r| {
                let score = dot(query.as_slice(), r.vector.as_slice()) / (qnorm * r.vector.norm());
                Hit {
                    record: r,
                    score: score.clamp(-1.0, 1.0),
                }
            })
            .collect();
        let order = |a: &Hit<'_, P>, b: &Hit<'_, P>| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.record.record_id.cmp(&b.record.record_id))
        };
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// Writes a complete snapshot to `path` (via a temporary file and rename).
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let tmp = path.with_extension("tmp");
        let io = |e| IndexError::io(path, e);
        let mut body = Vec::new();
        let mut hasher = Sha256::new();
        for r in &self.records {
            let line = render_record(r);
            hasher.update(&line);
            body.extend_from_slice(&line);
        }
        {
            let mut f = File::create(&tmp).map_err(io)?;
            f.write_all(&render_header(self.dimension, self.records.len(), &hasher))
                .map_err(io)?;
            f.write_all(&body).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    /// Reads a file produced by [`save`](Self::save) or an appending index.
    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Ok(Self::read_committed(path)?.0)
    }

    /// Opens (or creates) a file-backed index; later upserts append to it.
    pub fn open(path: &Path, dimension: usize) -> Result<Self, IndexError> {
        let mut index = if path.exists() {
            let index = Self::load(path)?;
            if index.dimension != dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: dimension,
                    got: index.dimension,
                });
            }
            index
        } else {
            let index = Self::new(dimension);
            index.save(path)?;
            index
        };
        index.attach(path)?;
        Ok(index)
    }

    fn attach(&mut self, path: &Path) -> Result<(), IndexError> {
        let (_, hasher, committed_len) = Self::read_committed(path)?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(|e| IndexError::io(path, e))?;
        // Drop any uncommitted tail left by an interrupted append.
        file.set_len(committed_len)
            .map_err(|e| IndexError::io(path, e))?;
        self.log = Some(AppendLog {
            path: path.to_path_buf(),
            file,
            hasher,
            committed_len,
        });
        Ok(())
    }

    fn read_committed(path: &Path) -> Result<(Self, Sha256, u64), IndexError> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| IndexError::io(path, e))?;
        if bytes.len() < HEADER_WIDTH + 1 || bytes[HEADER_WIDTH] != b'\n' {
            return Err(IndexError::corrupt(path, "truncated or missing header"));
        }
        let header: Header = serde_json::from_slice(&bytes[..HEADER_WIDTH])
            .map_err(|e| IndexError::corrupt(path, format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(IndexError::corrupt(
                path,
                format!("unknown format {:?}", header.format),
            ));
        }
        let mut index = Self::new(header.dimension);
        let mut hasher = Sha256::new();
        let mut offset = HEADER_WIDTH + 1;
        let mut cursor = &bytes[offset..];
        for n in 0..header.count {
            let mut line = Vec::new();
            let read = cursor
                .read_until(b'\n', &mut line)
                .map_err(|e| IndexError::io(path, e))?;
            if read == 0 || line.last() != Some(&b'\n') {
                return Err(IndexError::corrupt(
                    path,
                    format!("expected {} records, found {n}", header.count),
                ));
            }
            hasher.update(&line);
            offset += read;
            let disk: DiskRecord<P> = serde_json::from_slice(&line)
                .map_err(|e| IndexError::corrupt(path, format!("record {n}: {e}")))?;
            let vector = Vector::from_base64(&disk.vector)
                .ok_or_else(|| IndexError::corrupt(path, format!("record {n}: bad vector")))?;
            if vector.dimension() != header.dimension {
                return Err(IndexError::corrupt(
                    path,
                    format!("record {n}: dimension {}", vector.dimension()),
                ));
            }
            if index.contains(&disk.record_id) {
                return Err(IndexError::corrupt(
                    path,
                    format!("duplicate record id {:?}", disk.record_id),
                ));
            }
            index
                .positions
                .insert(disk.record_id.clone(), index.records.len());
            index.records.push(Record {
                record_id: disk.record_id,
                vector,
                payload: disk.payload,
            });
        }
        if hex::encode(hasher.clone().finalize()) != header.checksum {
            return Err(IndexError::corrupt(path, "checksum mismatch"));
        }
        Ok((index, hasher, offset as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SeedCorpus,
    Feedback,
}

/// Payload stored for every labelled post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostPayload {
    pub text: String,
    pub label: Label,
    pub provenance: Provenance,
    /// Set for records created by moderator feedback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_id: Option<String>,
}

pub type PostIndex = VectorIndex<PostPayload>;

/// An embedded labelled post ready for insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedExample {
    pub record_id: String,
    pub text: String,
    pub label: Label,
    pub vector: Vector,
    pub provenance: Provenance,
    pub feedback_id: Option<String>,
}

impl PostIndex {
    pub fn upsert_example(&mut self, example: IndexedExample) -> Result<String, IndexError> {
        self.upsert(
            example.record_id,
            example.vector,
            PostPayload {
                text: example.text,
                label: example.label,
                provenance: example.provenance,
                feedback_id: example.feedback_id,
            },
        )
    }
}

/// A retrieved neighbour as shown to the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarPost {
    pub record_id: String,
    pub text: String,
    /// Raw cosine similarity in `[-1, 1]`.
    pub score: f64,
    pub label: Label,
}

impl From<Hit<'_, PostPayload>> for SimilarPost {
    fn from(hit: Hit<'_, PostPayload>) -> Self {
        SimilarPost {
            record_id: hit.record.record_id.clone(),
            text: hit.record.payload.text.clone(),
            score: hit.score,
            label: hit.record.payload.label,
        }
    }
}

/// One labelled line of a seed corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub line: usize,
    pub source_id: String,
    pub label: Label,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("line {line}: empty text")]
    EmptyText { line: usize },
}

impl CorpusError {
    pub fn line(&self) -> usize {
        match self {
            CorpusError::Malformed { line, .. } | CorpusError::EmptyText { line } => *line,
        }
    }
}

/// Parses one `id<TAB>label<TAB>text` line (`label` is `1` for hate, `0`
/// otherwise). `line` is 1-based.
pub fn parse_corpus_line(line: usize, raw: &str) -> Result<CorpusRecord, CorpusError> {
    let raw = raw.trim_end_matches(['\r', '\n']);
    if raw.trim().is_empty() {
        return Err(CorpusError::EmptyText { line });
    }
    let mut fields = raw.splitn(3, '\t');
    let (id, label, text) = match (fields.next(), fields.next(), fields.next()) {
        (Some(id), Some(label), Some(text)) => (id, label, text),
        _ => {
            return Err(CorpusError::Malformed {
                line,
                detail: "expected id<TAB>label<TAB>text".into(),
            })
        }
    };
    let label = match label.trim() {
        "1" => Label::Hate,
        "0" => Label::NotHate,
        other => {
            return Err(CorpusError::Malformed {
                line,
                detail: format!("label must be 0 or 1, got {other:?}"),
            })
        }
    };
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyText { line });
    }
    Ok(CorpusRecord {
        line,
        source_id: id.to_string(),
        label,
        text: text.to_string(),
    })
}

/// Reads a whole TSV corpus; the final newline does not create a record.
pub fn read_corpus(path: &Path) -> io::Result<Vec<Result<CorpusRecord, CorpusError>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| parse_corpus_line(i + 1, l))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestFailureKind {
    #[error("embedding failed: {0}")]
    EmbedFailed(EmbedError),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("index write failed: {0}")]
    IndexWrite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestFailure {
    pub line: usize,
    pub kind: IngestFailureKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub ingested: usize,
    pub record_ids: Vec<String>,
    pub failures: Vec<IngestFailure>,
}

/// Embeds and appends every record under a fresh id. Per-record failures
/// are collected; the stream is never aborted.
pub fn ingest_corpus<I>(index: &mut PostIndex, embedder: &dyn Embedder, records: I) -> IngestReport
where
    I: IntoIterator<Item = Result<CorpusRecord, CorpusError>>,
{
    let mut report = IngestReport::default();
    let mut batch: Vec<CorpusRecord> = Vec::with_capacity(EMBED_BATCH);
    for item in records {
        match item {
            Ok(rec) => {
                batch.push(rec);
                if batch.len() == EMBED_BATCH {
                    flush_batch(index, embedder, &mut batch, &mut report);
                }
            }
            Err(CorpusError::EmptyText { line }) => report.failures.push(IngestFailure {
                line,
                kind: IngestFailureKind::EmbedFailed(EmbedError::EmptyText),
            }),
            Err(e @ CorpusError::Malformed { .. }) => report.failures.push(IngestFailure {
                line: e.line(),
                kind: IngestFailureKind::Malformed(e.to_string()),
            }),
        }
    }
    flush_batch(index, embedder, &mut batch, &mut report);
    report.failures.sort_by_key(|f| f.line);
    report
}

fn flush_batch(
    index: &mut PostIndex,
    embedder: &dyn Embedder,
    batch: &mut Vec<CorpusRecord>,
    report: &mut IngestReport,
) {
    if batch.is_empty() {
        return;
    }
    let texts: Vec<&str> = batch.iter().map(|r| r.text.as_str()).collect();
    let vectors: Vec<Result<Vector, EmbedError>> =
        match embed_many(embedder, &texts, index.dimension()) {
            Ok(vs) => vs.into_iter().map(Ok).collect(),
            // Retry one by one so the failure lands on the right record.
            Err(_) => texts
                .iter()
                .map(|t| embed(embedder, t, index.dimension()))
                .collect(),
        };
    for (rec, vector) in batch.drain(..).zip(vectors) {
        let vector = match vector {
            Ok(v) => v,
            Err(e) => {
                report.failures.push(IngestFailure {
                    line: rec.line,
                    kind: IngestFailureKind::EmbedFailed(e),
                });
                continue;
            }
        };
        let id = index.next_id("post-");
        match index.upsert(
            id,
            vector,
            PostPayload {
                text: rec.text,
                label: rec.label,
                provenance: Provenance::SeedCorpus,
                feedback_id: None,
            },
        ) {
            Ok(id) => {
                report.ingested += 1;
                report.record_ids.push(id);
            }
            Err(e) => report.failures.push(IngestFailure {
                line: rec.line,
                kind: IngestFailureKind::IndexWrite(e.to_string()),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stubs::HashingEmbedder;

    fn unit(dim: usize, hot: &[(usize, f32)]) -> Vector {
        let mut v = vec![0.0; dim];
        for &(i, x) in hot {
            v[i] = x;
        }
        Vector::new(v).unwrap()
    }

    fn payload(text: &str, label: Label) -> PostPayload {
        PostPayload {
            text: text.into(),
            label,
            provenance: Provenance::SeedCorpus,
            feedback_id: None,
        }
    }

    struct FixedEmbedder(Vec<f32>);
    impl Embedder for FixedEmbedder {
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EndpointError> {
            Ok(texts.iter().map(|_| self.0.clone()).collect())
        }
    }

    #[test]
    fn embed_normalizes_three_four_vector() {
        let mut raw = vec![0.0f32; 1024];
        raw[0] = 3.0;
        raw[1] = 4.0;
        let v = embed(&FixedEmbedder(raw), "text", 1024).unwrap();
        assert_eq!(v.dimension(), 1024);
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-7);
        assert!(v.as_slice()[2..].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn embed_rejects_empty_and_wrong_dimension() {
        let e = FixedEmbedder(vec![1.0; 8]);
        assert_eq!(embed(&e, "", 8), Err(EmbedError::EmptyText));
        assert_eq!(
            embed(&e, "x", 1024),
            Err(EmbedError::DimensionMismatch {
                expected: 1024,
                got: 8
            })
        );
    }

    #[test]
    fn cosine_examples() {
        let a = unit(4, &[(0, 1.0)]);
        let b = unit(4, &[(1, 1.0)]);
        let c = unit(4, &[(0, 1.0), (1, 1.0)]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert!(
            (cosine_similarity(&c, &a).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8
        );
        assert!(matches!(
            cosine_similarity(&a, &unit(3, &[(0, 1.0)])),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&a, &unit(4, &[])),
            Err(IndexError::ZeroVector)
        ));
    }

    #[test]
    fn upsert_then_self_retrieval() {
        let mut idx = PostIndex::new(4);
        let v = unit(4, &[(0, 2.0), (2, 1.0)]);
        idx.upsert("a", v.clone(), payload("a", Label::Hate))
            .unwrap();
        idx.upsert("b", unit(4, &[(1, 1.0)]), payload("b", Label::NotHate))
            .unwrap();
        let hits = idx.top_k(&v, 5).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].record.record_id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert!(matches!(
            idx.upsert("a", v, payload("dup", Label::Hate)),
            Err(IndexError::DuplicateId(_))
        ));
    }

    #[test]
    fn stored_vectors_are_unit_length() {
        let mut idx = PostIndex::new(3);
        idx.upsert(
            "a",
            unit(3, &[(0, 3.0), (1, 4.0)]),
            payload("a", Label::Hate),
        )
        .unwrap();
        assert!((idx.records()[0].vector.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn top_k_errors_and_empty_index() {
        let idx = PostIndex::new(4);
        assert!(idx.top_k(&unit(4, &[(0, 1.0)]), 5).unwrap().is_empty());
        assert!(matches!(
            idx.top_k(&unit(4, &[(0, 1.0)]), 0),
            Err(IndexError::InvalidK)
        ));
        assert!(matches!(
            idx.top_k(&unit(4, &[]), 1),
            Err(IndexError::EmptyQuery)
        ));
        assert!(matches!(
            idx.top_k(&unit(5, &[(0, 1.0)]), 1),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut idx = PostIndex::new(2);
        for id in ["c", "a", "b"] {
            idx.upsert(id, unit(2, &[(0, 1.0)]), payload(id, Label::Hate))
                .unwrap();
        }
        let ids: Vec<_> = idx
            .top_k(&unit(2, &[(0, 1.0)]), 3)
            .unwrap()
            .into_iter()
            .map(|h| h.record.record_id.clone())
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn thousand_upserts_count() {
        let mut idx = PostIndex::new(2);
        for i in 0..1000 {
            let id = idx.next_id("p-");
            idx.upsert(
                id,
                unit(2, &[(0, 1.0), (1, i as f32)]),
                payload("t", Label::Hate),
            )
            .unwrap();
        }
        assert_eq!(idx.len(), 1000);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posts.idx");
        let emb = HashingEmbedder::new(64);
        let mut idx = PostIndex::new(64);
        let recs = (0..100).map(|i| {
            Ok(CorpusRecord {
                line: i + 1,
                source_id: i.to_string(),
                label: Label::from_flag(i % 3 == 0),
                text: format!("post number {i} about topic {}", i % 7),
            })
        });
        assert_eq!(ingest_corpus(&mut idx, &emb, recs).ingested, 100);
        idx.save(&path).unwrap();
        let loaded = PostIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), 100);
        for i in 0..10 {
            let q = embed(&emb, &format!("topic {i}"), 64).unwrap();
            let a: Vec<_> = idx.top_k(&q, 7).unwrap();
            let b: Vec<_> = loaded.top_k(&q, 7).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posts.idx");
        let mut idx = PostIndex::new(4);
        for i in 0..5 {
            idx.upsert(
                format!("r{i}"),
                unit(4, &[(i % 4, 1.0)]),
                payload("x", Label::Hate),
            )
            .unwrap();
        }
        idx.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(
            PostIndex::load(&path),
            Err(IndexError::CorruptIndexFile { .. })
        ));
        fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(
            PostIndex::load(&path),
            Err(IndexError::CorruptIndexFile { .. })
        ));
    }

    #[test]
    fn tampered_record_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posts.idx");
        let mut idx = PostIndex::new(2);
        idx.upsert("r0", unit(2, &[(0, 1.0)]), payload("hello", Label::Hate))
            .unwrap();
        idx.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("hello", "jello");
        fs::write(&path, text).unwrap();
        match PostIndex::load(&path) {
            Err(IndexError::CorruptIndexFile { detail, .. }) => {
                assert!(detail.contains("checksum"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_index_file_loads_with_zero_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.idx");
        PostIndex::new(16).save(&path).unwrap();
        let idx = PostIndex::load(&path).unwrap();
        assert_eq!(idx.len(), 0);
        assert_eq!(idx.dimension(), 16);
    }

    #[test]
    fn appends_are_durable_and_uncommitted_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("live.idx");
        {
            let mut idx = PostIndex::open(&path, 2).unwrap();
            idx.upsert("a", unit(2, &[(0, 1.0)]), payload("a", Label::Hate))
                .unwrap();
            idx.upsert("b", unit(2, &[(1, 1.0)]), payload("b", Label::NotHate))
                .unwrap();
        }
        // Simulate a crash after writing a record line but before the header commit.
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"record_id\":\"half").unwrap();
        drop(f);
        let loaded = PostIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        let mut reopened = PostIndex::open(&path, 2).unwrap();
        reopened
            .upsert(
                "c",
                unit(2, &[(0, 1.0), (1, 1.0)]),
                payload("c", Label::Hate),
            )
            .unwrap();
        let again = PostIndex::load(&path).unwrap();
        assert_eq!(again.len(), 3);
        assert!(again.contains("c"));
    }

    #[test]
    fn remove_rewrites_backing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("live.idx");
        let mut idx = PostIndex::open(&path, 2).unwrap();
        idx.upsert("a", unit(2, &[(0, 1.0)]), payload("a", Label::Hate))
            .unwrap();
        idx.upsert("b", unit(2, &[(1, 1.0)]), payload("b", Label::Hate))
            .unwrap();
        assert_eq!(idx.remove(&["a".to_string()]).unwrap(), 1);
        idx.upsert("d", unit(2, &[(1, 1.0)]), payload("d", Label::Hate))
            .unwrap();
        let loaded = PostIndex::load(&path).unwrap();
        assert!(!loaded.contains("a"));
        assert!(loaded.contains("b") && loaded.contains("d"));
    }

    #[test]
    fn corpus_line_parsing() {
        let r = parse_corpus_line(1, "x1\t1\tsome text\twith tab").unwrap();
        assert_eq!(r.label, Label::Hate);
        assert_eq!(r.text, "some text\twith tab");
        assert_eq!(
            parse_corpus_line(2, ""),
            Err(CorpusError::EmptyText { line: 2 })
        );
        assert!(matches!(
            parse_corpus_line(3, "x\t7\ttext"),
            Err(CorpusError::Malformed { .. })
        ));
    }

    #[test]
    fn ingest_reports_empty_line_and_appends_on_rerun() {
        let emb = HashingEmbedder::new(32);
        let mut lines: Vec<String> = (0..199)
            .map(|i| format!("id{i}\t{}\tpost {i}", i % 2))
            .collect();
        lines.insert(50, String::new());
        let parse = || {
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| parse_corpus_line(i + 1, l))
                .collect::<Vec<_>>()
        };
        let mut idx = PostIndex::new(32);
        let report = ingest_corpus(&mut idx, &emb, parse());
        assert_eq!(report.ingested, 199);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].line, 51);
        assert_eq!(
            report.failures[0].kind,
            IngestFailureKind::EmbedFailed(EmbedError::EmptyText)
        );
        ingest_corpus(&mut idx, &emb, parse());
        assert_eq!(idx.len(), 398);
    }
}
