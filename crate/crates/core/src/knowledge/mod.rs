//! Stage one: prompt an external LLM for auxiliary knowledge about each
//! sentence, with a content-addressed cache in front of the engine.

mod cache;
mod direct;
mod engine;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use cache::{CacheEntry, ResponseCache};
pub use direct::{parse_direct, DirectParse, DirectPrediction};
pub use engine::{
    ChatRequest, Completion, Engine, EngineConfig, EngineFailure, MockEngine, MockFallback,
    OpenAiEngine,
};

use crate::corpus::AnnotatedSentence;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::msea::{build_context, select_top_n, Exemplar};
use crate::promptgen::{assemble, PromptDoc, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeText {
    pub content: String,
    /// Whitespace token count of `content`.
    pub m: usize,
    pub prompt_hash: String,
    pub engine: String,
    pub timestamp: u64,
}

impl KnowledgeText {
    pub fn new(content: String, prompt_hash: String, engine: String, timestamp: u64) -> Self {
        let m = content.split_whitespace().count();
        KnowledgeText {
            content,
            m,
            prompt_hash,
            engine,
            timestamp,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        self.content.split_whitespace().map(String::from).collect()
    }
}

pub type KnowledgeMap = BTreeMap<String, KnowledgeText>;

/// Returns the cached answer for `prompt`, or asks `engine` with retries and
/// caches a non-empty answer.
pub fn generate(
    prompt: &PromptDoc,
    cfg: &EngineConfig,
    engine: &dyn Engine,
    cache: &ResponseCache,
) -> Result<KnowledgeText> {
    let key = ResponseCache::key(&prompt.content_hash, &cfg.model, cfg.temperature);
    if let Some(hit) = cache.get(&key)? {
        return Ok(hit.knowledge);
    }
    let request = ChatRequest {
        model: cfg.model.clone(),
        prompt: prompt.text.clone(),
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
    };
    let mut last = String::new();
    for attempt in 0..cfg.max_attempts {
        match engine.complete(&request) {
            Ok(done) => {
                if done.content.trim().is_empty() {
                    return Err(Error::Engine(format!(
                        "empty response for prompt {}",
                        prompt.content_hash
                    )));
                }
                let knowledge = KnowledgeText::new(
                    done.content,
                    prompt.content_hash.clone(),
                    engine.id(),
                    done.created,
                );
                cache.put(&key, &CacheEntry {
                    request,
                    knowledge: knowledge.clone(),
                })?;
                return Ok(knowledge);
            }
            Err(EngineFailure::Fatal(m)) => return Err(Error::Engine(m)),
            Err(EngineFailure::Transient(m)) => {
                log::warn!("attempt {} of {} failed: {m}", attempt + 1, cfg.max_attempts);
                last = m;
                if attempt + 1 < cfg.max_attempts {
                    std::thread::sleep(cfg.backoff(attempt));
                }
            }
        }
    }
    Err(Error::Engine(format!(
        "gave up after {} attempts: {last}",
        cfg.max_attempts
    )))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub prompt_hash: String,
    pub m: usize,
}

#[derive(Debug, Default)]
pub struct AugmentOutcome {
    /// Successful results in corpus order.
    pub knowledge: Vec<(String, KnowledgeText)>,
    pub failures: Vec<(String, String)>,
}

impl AugmentOutcome {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.knowledge
            .iter()
            .map(|(id, k)| ManifestEntry {
                id: id.clone(),
                prompt_hash: k.prompt_hash.clone(),
                m: k.m,
            })
            .collect()
    }

    pub fn to_map(&self) -> KnowledgeMap {
        self.knowledge.iter().cloned().collect()
    }
}

/// Everything needed to turn a sentence into a prompt and a knowledge text.
pub struct Augmenter<'a> {
    pub exemplars: &'a [Exemplar],
    pub template: &'a PromptTemplate,
    pub embedder: &'a Embedder,
    pub engine: &'a dyn Engine,
    pub cache: &'a ResponseCache,
    pub cfg: &'a EngineConfig,
    /// Number of in-context examples; 0 gives a prompt with no examples.
    pub n: usize,
}

impl Augmenter<'_> {
    pub fn prompt_for(&self, sentence: &AnnotatedSentence) -> Result<PromptDoc> {
        let context = if self.n == 0 || self.exemplars.is_empty() {
            Vec::new()
        } else {
            let query = self.embedder.fuse(
                &sentence.id,
                &sentence.tokens,
                sentence.caption.as_deref(),
            )?;
            let selection = select_top_n(&query, self.exemplars, self.n)?;
            build_context(&selection, self.exemplars)?
        };
        Ok(assemble(
            self.template,
            &context,
            &sentence.id,
            &sentence.tokens,
            sentence.caption.as_deref(),
        ))
    }

    pub fn knowledge_for(&self, sentence: &AnnotatedSentence) -> Result<KnowledgeText> {
        let prompt = self.prompt_for(sentence)?;
        generate(&prompt, self.cfg, self.engine, self.cache)
    }

    /// Runs every sentence through a bounded worker pool. Failures are
    /// collected rather than aborting the run; the cache keeps what succeeded.
    pub fn augment(&self, corpus: &[AnnotatedSentence]) -> AugmentOutcome {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<KnowledgeText>>>> =
            Mutex::new((0..corpus.len()).map(|_| None).collect());
        let workers = self.cfg.concurrency.max(1).min(corpus.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= corpus.len() {
                        break;
                    }
                    let r = self.knowledge_for(&corpus[i]);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        let mut out = AugmentOutcome::default();
        for (s, r) in corpus.iter().zip(results.into_inner().unwrap()) {
            match r.expect("every index is processed") {
                Ok(k) => out.knowledge.push((s.id.clone(), k)),
                Err(e) => {
                    log::error!("{}: {e}", s.id);
                    out.failures.push((s.id.clone(), e.to_string()));
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct KnowledgeRecord {
    id: String,
    #[serde(flatten)]
    knowledge: KnowledgeText,
}

pub fn write_knowledge<'a, I>(items: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a String, &'a KnowledgeText)>,
{
    let mut out = String::new();
    for (id, k) in items {
        out.push_str(&serde_json::to_string(&KnowledgeRecord {
            id: id.clone(),
            knowledge: k.clone(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_knowledge<R: BufRead>(reader: R) -> Result<KnowledgeMap> {
    let mut map = KnowledgeMap::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("knowledge", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KnowledgeRecord = serde_json::from_str(&line)?;
        if map.insert(rec.id.clone(), rec.knowledge).is_some() {
            return Err(Error::DuplicateId(rec.id));
        }
    }
    Ok(map)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptgen::content_hash;

    fn fast_cfg() -> EngineConfig {
        EngineConfig {
            backoff_ms: 0,
            max_attempts: 3,
            ..Default::default()
        }
    }

    #[test]
    fn cache_hit_skips_engine() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let doc = PromptDoc::new("prompt".into(), 0, "s:0");
        let engine = MockEngine::new(MockFallback::Error).with_fixture(content_hash("prompt"), "K.");
        let a = generate(&doc, &fast_cfg(), &engine, &cache).unwrap();
        assert_eq!(a.content, "K.");
        assert_eq!(a.m, 1);
        let b = generate(&doc, &fast_cfg(), &engine, &cache).unwrap();
        assert_eq!(a, b);
        assert_eq!(engine.calls(), 1);

        // A different model misses the cache.
        let other = EngineConfig {
            model: "other".into(),
            ..fast_cfg()
        };
        generate(&doc, &other, &engine, &cache).unwrap();
        assert_eq!(engine.calls(), 2);
    }

    #[test]
    fn empty_response_is_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let doc = PromptDoc::new("p".into(), 0, "s:0");
        let engine = MockEngine::new(MockFallback::Fixed("  ".into()));
        assert!(matches!(
            generate(&doc, &fast_cfg(), &engine, &cache),
            Err(Error::Engine(_))
        ));
        assert!(cache.is_empty().unwrap());
    }

    #[test]
    fn retries_transient_failures() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let doc = PromptDoc::new("p".into(), 0, "s:0");
        let engine = MockEngine::new(MockFallback::Fixed("ok".into()));
        engine.fail_next(2);
        assert_eq!(generate(&doc, &fast_cfg(), &engine, &cache).unwrap().content, "ok");
        assert_eq!(engine.calls(), 3);

        let doc = PromptDoc::new("q".into(), 0, "s:1");
        engine.fail_next(3);
        let err = generate(&doc, &fast_cfg(), &engine, &cache).unwrap_err();
        assert!(err.to_string().contains("injected failure"), "{err}");
    }

    #[test]
    fn knowledge_file_round_trip() {
        let k = KnowledgeText::new("a b  c".into(), "h".into(), "mock".into(), 0);
        assert_eq!(k.m, 3);
        let id = "s:0".to_string();
        let text = write_knowledge([(&id, &k)]).unwrap();
        let map = read_knowledge(text.as_bytes()).unwrap();
        assert_eq!(map[&id], k);
        let dup = format!("{text}{text}");
        assert!(read_knowledge(dup.as_bytes()).is_err());
    }
}
