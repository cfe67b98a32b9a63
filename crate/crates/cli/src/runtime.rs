//! Wires endpoints, indexes and the agent together from a [`ServiceConfig`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use modagent_core::agent::Agent;
use modagent_core::domain::Label;
use modagent_core::endpoints::{
    ClassifierEndpoint, DictionaryEndpoint, Embedder, HttpClassifier, HttpDictionary, HttpEmbedder,
    HttpGenerator, TextGenerator,
};
use modagent_core::eval::{load_eval_corpus, EvalError, LabeledPost};
use modagent_core::guidelines::{ChunkPayload, GuidelineIndex};
use modagent_core::index::{IndexError, PostIndex, PostPayload, SharedIndex, VectorIndex};
use modagent_core::stubs::{stub_planner, stub_toolbox, EchoAnnotator};
use modagent_core::tools::{default_wordlist, load_wordlist, Toolbox};
use modagent_core::trace::{Clock, SteppingClock, SystemClock};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::config::ServiceConfig;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("index file not found: {0}")]
    IndexMissing(PathBuf),
    #[error("{0}")]
    IndexCorrupt(String),
    #[error("{0}")]
    Index(String),
    #[error("corpus {path}: {detail}")]
    Corpus { path: PathBuf, detail: String },
    #[error("wordlist {path}: {detail}")]
    Wordlist { path: PathBuf, detail: String },
}

impl RuntimeError {
    pub fn code(&self) -> &'static str {
        match self {
            RuntimeError::IndexMissing(_) => "index_missing",
            RuntimeError::IndexCorrupt(_) => "index_corrupt",
            RuntimeError::Index(_) => "index_error",
            RuntimeError::Corpus { .. } => "corpus_invalid",
            RuntimeError::Wordlist { .. } => "wordlist_invalid",
        }
    }
}

impl From<IndexError> for RuntimeError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::CorruptIndexFile { .. } => RuntimeError::IndexCorrupt(e.to_string()),
            other => RuntimeError::Index(other.to_string()),
        }
    }
}

/// How to obtain an index file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexAccess {
    /// Fail when the file is missing.
    Require,
    /// Create the file when missing; later writes append to it.
    Create,
    /// Read the file if present, otherwise start empty in memory.
    ReadIfPresent,
}

pub fn open_index<P>(
    path: &Path,
    dimension: usize,
    access: IndexAccess,
) -> Result<VectorIndex<P>, RuntimeError>
where
    P: Clone + Serialize + DeserializeOwned,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if access == IndexAccess::Create {
            std::fs::create_dir_all(dir)
                .map_err(|e| RuntimeError::Index(format!("{}: {e}", dir.display())))?;
        }
    }
    match access {
        IndexAccess::Require if !path.exists() => {
            Err(RuntimeError::IndexMissing(path.to_path_buf()))
        }
        IndexAccess::ReadIfPresent if !path.exists() => Ok(VectorIndex::new(dimension)),
        IndexAccess::ReadIfPresent => {
            let index = VectorIndex::load(path)?;
            if index.dimension() != dimension {
                return Err(RuntimeError::Index(format!(
                    "{} has dimension {}, config says {dimension}",
                    path.display(),
                    index.dimension()
                )));
            }
            Ok(index)
        }
        IndexAccess::Require | IndexAccess::Create => Ok(VectorIndex::open(path, dimension)?),
    }
}

/// An endpoint as reported by the health route.
#[derive(Clone)]
pub enum Dependency {
    Embedder(Arc<dyn Embedder>),
    Classifier(Arc<dyn ClassifierEndpoint>),
    Dictionary(Arc<dyn DictionaryEndpoint>),
    Generator(Arc<dyn TextGenerator>),
}

impl Dependency {
    pub fn probe(&self) -> bool {
        match self {
            Dependency::Embedder(e) => e.probe(),
            Dependency::Classifier(c) => c.probe(),
            Dependency::Dictionary(d) => d.probe(),
            Dependency::Generator(g) => g.probe(),
        }
    }
}

#[derive(Clone)]
pub struct DependencyInfo {
    pub name: &'static str,
    pub url: String,
    pub dependency: Dependency,
}

/// List of dependencies for health reporting, derived from a toolbox.
pub fn dependencies(
    toolbox: &Toolbox,
    planner: Option<&Arc<dyn TextGenerator>>,
    config: &ServiceConfig,
) -> Vec<DependencyInfo> {
    let stub = config.stub.is_some();
    let url = |u: &str| {
        if stub {
            "stub".to_string()
        } else {
            u.to_string()
        }
    };
    let e = &config.endpoints;
    let mut deps = vec![
        DependencyInfo {
            name: "classifier",
            url: url(&e.classifier),
            dependency: Dependency::Classifier(toolbox.classifier.clone()),
        },
        DependencyInfo {
            name: "embedding",
            url: url(&e.embedding),
            dependency: Dependency::Embedder(toolbox.embedder.clone()),
        },
        DependencyInfo {
            name: "dictionary",
            url: url(&e.dictionary),
            dependency: Dependency::Dictionary(toolbox.dictionary.clone()),
        },
        DependencyInfo {
            name: "reasoning",
            url: url(&e.reasoning),
            dependency: Dependency::Generator(toolbox.reasoner.clone()),
        },
    ];
    if let Some(p) = planner {
        deps.push(DependencyInfo {
            name: "planner",
            url: url(&e.planner),
            dependency: Dependency::Generator(p.clone()),
        });
    }
    deps
}

pub struct Runtime {
    pub agent: Agent,
    pub annotator: Arc<dyn TextGenerator>,
    pub dependencies: Vec<DependencyInfo>,
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s)
}

/// Gold labels for the stub oracles: the configured gold corpus plus
/// `extra`.
pub fn stub_gold(
    config: &ServiceConfig,
    extra: &[LabeledPost],
) -> Result<HashMap<String, Label>, RuntimeError> {
    let mut gold = HashMap::new();
    if let Some(path) = config.stub.as_ref().and_then(|s| s.gold_corpus.as_ref()) {
        let corpus = load_eval_corpus(path).map_err(|e| corpus_err(path, e))?;
        gold.extend(corpus.into_iter().map(|p| (p.post.text, p.gold)));
    }
    gold.extend(extra.iter().map(|p| (p.post.text.clone(), p.gold)));
    Ok(gold)
}

pub fn corpus_err(path: &Path, e: EvalError) -> RuntimeError {
    RuntimeError::Corpus {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// The embedder alone, for ingestion.
pub fn build_embedder(config: &ServiceConfig) -> Arc<dyn Embedder> {
    if config.stub.is_some() {
        Arc::new(modagent_core::stubs::HashingEmbedder::new(config.dimension))
    } else {
        Arc::new(HttpEmbedder::new(
            &config.endpoints.embedding,
            secs(config.timeouts.embedding_secs),
        ))
    }
}

/// Model used to title and summarize guideline chunks.
pub fn build_annotator(config: &ServiceConfig) -> Arc<dyn TextGenerator> {
    if config.stub.is_some() {
        Arc::new(EchoAnnotator)
    } else {
        let url = config
            .endpoints
            .annotation
            .as_deref()
            .unwrap_or(&config.endpoints.reasoning);
        Arc::new(HttpGenerator::reasoning(
            url,
            secs(config.timeouts.reasoning_secs),
        ))
    }
}

pub fn build_runtime(
    config: &ServiceConfig,
    posts: SharedIndex<PostPayload>,
    guidelines: SharedIndex<ChunkPayload>,
    extra_gold: &[LabeledPost],
) -> Result<Runtime, RuntimeError> {
    let wordlist = match &config.paths.wordlist {
        Some(path) => load_wordlist(path).map_err(|e| RuntimeError::Wordlist {
            path: path.clone(),
            detail: e.to_string(),
        })?,
        None => default_wordlist(),
    };
    let (toolbox, planner, clock): (Toolbox, Arc<dyn TextGenerator>, Arc<dyn Clock>) = match &config
        .stub
    {
        Some(stub) => {
            let gold = Arc::new(stub_gold(config, extra_gold)?);
            let mut toolbox = stub_toolbox(stub.settings, gold.clone(), posts, guidelines);
            toolbox.wordlist = Arc::new(wordlist);
            let clock = SteppingClock::new(SteppingClock::DEFAULT_START_MICROS, 1000);
            (
                toolbox,
                Arc::new(stub_planner(stub.settings, gold)),
                Arc::new(clock),
            )
        }
        None => {
            let e = &config.endpoints;
            let t = &config.timeouts;
            let toolbox = Toolbox {
                classifier: Arc::new(HttpClassifier::new(&e.classifier, secs(t.classifier_secs))),
                embedder: build_embedder(config),
                posts,
                dictionary: Arc::new(HttpDictionary::new(&e.dictionary, secs(t.dictionary_secs))),
                reasoner: Arc::new(HttpGenerator::reasoning(
                    &e.reasoning,
                    secs(t.reasoning_secs),
                )),
                guidelines,
                wordlist: Arc::new(wordlist),
            };
            let planner = Arc::new(HttpGenerator::planner(&e.planner, secs(t.planner_secs)));
            (toolbox, planner, Arc::new(SystemClock::new()))
        }
    };
    let dependencies = dependencies(&toolbox, Some(&planner), config);
    Ok(Runtime {
        agent: Agent::new(toolbox, Some(planner), clock),
        annotator: build_annotator(config),
        dependencies,
    })
}

/// Both indexes as the service needs them: they must already exist.
pub fn open_service_indexes(
    config: &ServiceConfig,
) -> Result<(SharedIndex<PostPayload>, SharedIndex<ChunkPayload>), RuntimeError> {
    let posts: PostIndex = open_index(
        &config.paths.posts_index,
        config.dimension,
        IndexAccess::Require,
    )?;
    let guidelines: GuidelineIndex = open_index(
        &config.paths.guidelines_index,
        config.dimension,
        IndexAccess::Require,
    )?;
    Ok((posts.into_shared(), guidelines.into_shared()))
}
