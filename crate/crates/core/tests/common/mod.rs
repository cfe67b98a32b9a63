#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use modagent_core::agent::Agent;
use modagent_core::domain::{Label, Post};
use modagent_core::endpoints::TextGenerator;
use modagent_core::eval::LabeledPost;
use modagent_core::guidelines::GuidelineIndex;
use modagent_core::index::PostPayload;
use modagent_core::index::{ingest_corpus, read_corpus, PostIndex, SharedIndex};
use modagent_core::stubs::{stub_planner, stub_toolbox, HashingEmbedder, StubSettings};
use modagent_core::trace::SteppingClock;

pub const DIM: usize = 256;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn seed_index() -> SharedIndex<PostPayload> {
    let mut index = PostIndex::new(DIM);
    let report = ingest_corpus(
        &mut index,
        &HashingEmbedder::new(DIM),
        read_corpus(&fixture("posts.tsv")).unwrap(),
    );
    assert_eq!(report.ingested, 200);
    index.into_shared()
}

pub fn gold_map(corpus: &[LabeledPost]) -> Arc<HashMap<String, Label>> {
    Arc::new(
        corpus
            .iter()
            .map(|p| (p.post.text.clone(), p.gold))
            .collect(),
    )
}

/// Balanced synthetic posts; even ids are hate.
pub fn synthetic(n: usize, tag: &str) -> Vec<LabeledPost> {
    (0..n)
        .map(|i| LabeledPost {
            post: Post::new(
                format!("{tag}-{i:05}"),
                format!("synthetic {tag} message number {i}"),
            )
            .unwrap(),
            gold: Label::from_flag(i % 2 == 0),
        })
        .collect()
}

pub fn clock() -> Arc<SteppingClock> {
    Arc::new(SteppingClock::new(
        SteppingClock::DEFAULT_START_MICROS,
        1000,
    ))
}

/// Agent over stub endpoints; `planner` defaults to the rule-following stub.
pub fn stub_agent(
    settings: StubSettings,
    corpus: &[LabeledPost],
    planner: Option<Arc<dyn TextGenerator>>,
) -> Agent {
    let gold = gold_map(corpus);
    let toolbox = stub_toolbox(
        settings,
        gold.clone(),
        seed_index(),
        GuidelineIndex::new(DIM).into_shared(),
    );
    let planner = planner.unwrap_or_else(|| Arc::new(stub_planner(settings, gold)));
    Agent::new(toolbox, Some(planner), clock())
}
