//! Corpus augmentation with the mock engine: resumability and cache transparency.

use pgim::corpus::{AnnotatedSentence, Tag, TagCategory};
use pgim::embedder::{Embedder, EmbedderSpec};
use pgim::knowledge::{
    read_knowledge, write_knowledge, Augmenter, Engine, EngineConfig, MockEngine, MockFallback,
    ResponseCache,
};
use pgim::msea::{gold_answer, Exemplar, ExemplarRecord};
use pgim::promptgen::{PromptMode, PromptTemplate, KNOWLEDGE_QUESTION};

fn sentence(id: &str, words: &[&str], tags: Vec<Tag>) -> AnnotatedSentence {
    AnnotatedSentence::new(id, words.iter().map(|w| w.to_string()).collect(), tags).unwrap()
}

fn corpus() -> Vec<AnnotatedSentence> {
    use Tag::*;
    use TagCategory::*;
    vec![
        sentence("t:0", &["alice", "in", "paris"], vec![B(Per), O, B(Loc)]),
        sentence("t:1", &["acme", "hires"], vec![B(Org), O]),
        sentence("t:2", &["nice", "day"], vec![O, O]),
    ]
}

fn exemplars(emb: &Embedder) -> Vec<Exemplar> {
    use Tag::*;
    use TagCategory::*;
    let src = [
        sentence("ex:0", &["bob", "visited", "tokyo"], vec![B(Per), O, B(Loc)]),
        sentence("ex:1", &["globex", "grew"], vec![B(Org), O]),
        sentence("ex:2", &["the", "olympics"], vec![O, B(Other)]),
    ];
    src.iter()
        .map(|s| {
            assert!(!gold_answer(s).unwrap().is_empty());
            ExemplarRecord::from_sentence(s, KNOWLEDGE_QUESTION)
                .unwrap()
                .into_exemplar(emb)
                .unwrap()
        })
        .collect()
}

struct Setup {
    emb: Embedder,
    ex: Vec<Exemplar>,
    template: PromptTemplate,
    cfg: EngineConfig,
}

impl Setup {
    fn new() -> Self {
        let emb = Embedder::new(EmbedderSpec::hashed(5, 16, 8)).unwrap();
        let ex = exemplars(&emb);
        Setup {
            emb,
            ex,
            template: PromptTemplate::for_mode(PromptMode::Knowledge),
            cfg: EngineConfig {
                backoff_ms: 1,
                max_attempts: 1,
                concurrency: 2,
                ..EngineConfig::default()
            },
        }
    }

    fn augmenter<'a>(&'a self, engine: &'a dyn Engine, cache: &'a ResponseCache) -> Augmenter<'a> {
        Augmenter {
            exemplars: &self.ex,
            template: &self.template,
            embedder: &self.emb,
            engine,
            cache,
            cfg: &self.cfg,
            n: 2,
        }
    }
}

#[test]
fn three_sentences_give_three_texts() {
    let s = Setup::new();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let engine = MockEngine::new(MockFallback::EchoText);
    let out = s.augmenter(&engine, &cache).augment(&corpus());
    assert!(out.failures.is_empty());
    assert_eq!(out.knowledge.len(), 3);
    assert_eq!(out.knowledge[0].1.content, "Text mentions: alice in paris");
    let manifest = out.manifest();
    assert_eq!(manifest.len(), 3);
    assert!(manifest.iter().all(|m| m.prompt_hash.len() == 64));
    // Distinct sentences give distinct prompts.
    assert_ne!(manifest[0].prompt_hash, manifest[1].prompt_hash);

    let text = write_knowledge(out.knowledge.iter().map(|(i, k)| (i, k))).unwrap();
    assert_eq!(read_knowledge(text.as_bytes()).unwrap(), out.to_map());
}

#[test]
fn interrupted_run_resumes_with_one_call() {
    let s = Setup::new();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let docs = corpus();

    // First run: the engine answers the first two prompts and dies on the third.
    let probe = MockEngine::new(MockFallback::Error);
    let aug = s.augmenter(&probe, &cache);
    let mut partial = MockEngine::new(MockFallback::Error);
    for d in &docs[..2] {
        partial = partial.with_fixture(aug.prompt_for(d).unwrap().content_hash, format!("answer {}", d.id));
    }
    let first = s.augmenter(&partial, &cache).augment(&docs);
    assert_eq!(first.knowledge.len(), 2);
    assert_eq!(first.failures.len(), 1);
    assert_eq!(first.failures[0].0, "t:2");
    assert_eq!(cache.len().unwrap(), 2);

    let resumed = MockEngine::new(MockFallback::EchoText);
    let second = s.augmenter(&resumed, &cache).augment(&docs);
    assert!(second.failures.is_empty());
    assert_eq!(resumed.calls(), 1);
    assert_eq!(second.knowledge[0].1.content, "answer t:0");
    assert_eq!(second.knowledge[2].1.content, "Text mentions: nice day");
}

#[test]
fn warm_cache_is_transparent() {
    let s = Setup::new();
    let docs = corpus();
    let cold_dir = tempfile::tempdir().unwrap();
    let cold_cache = ResponseCache::open(cold_dir.path()).unwrap();
    let engine = MockEngine::new(MockFallback::EchoText);
    let cold = s.augmenter(&engine, &cold_cache).augment(&docs);
    let warm = s.augmenter(&engine, &cold_cache).augment(&docs);
    assert_eq!(engine.calls(), 3);
    assert_eq!(cold.to_map(), warm.to_map());
    assert_eq!(cold.manifest(), warm.manifest());

    // An independent fresh run produces the same results as well.
    let other_dir = tempfile::tempdir().unwrap();
    let other_cache = ResponseCache::open(other_dir.path()).unwrap();
    let fresh = MockEngine::new(MockFallback::EchoText);
    let again = s.augmenter(&fresh, &other_cache).augment(&docs);
    assert_eq!(again.to_map(), cold.to_map());
}

#[test]
fn transient_failures_are_retried_and_no_examples_mode() {
    let mut s = Setup::new();
    s.cfg.max_attempts = 3;
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let engine = MockEngine::new(MockFallback::EchoText);
    engine.fail_next(2);
    let mut aug = s.augmenter(&engine, &cache);
    aug.cfg = &s.cfg;
    aug.n = 0;
    let docs = corpus();
    let doc = aug.prompt_for(&docs[0]).unwrap();
    assert_eq!(doc.example_count, 0);
    assert_eq!(doc.text.matches("Text: ").count(), 1);
    let k = aug.knowledge_for(&docs[0]).unwrap();
    assert_eq!(k.content, "Text mentions: alice in paris");
    assert_eq!(engine.calls(), 3);
}
