//! Stage two: `[T; <knowledge>; Z]` inputs, CRF training with dev-set model
//! selection, prediction, and the few-shot / cross-dataset protocols.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{spans_from_tags, AnnotatedSentence, EntitySpan, Tag, TagCategory};
use crate::crf::{CrfModel, TrainConfig, Trainer};
use crate::embedder::{Embedder, TokenReprSequence, KNOWLEDGE_SEPARATOR};
use crate::error::{Error, Result};
use crate::eval::{render_prf_table, score_spans, MetricReport, Scores};
use crate::knowledge::KnowledgeMap;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub id: String,
    /// `T`, the separator, then the (possibly truncated) knowledge tokens.
    pub tokens: Vec<String>,
    /// `|T|`; only these positions carry labels.
    pub boundary: usize,
    pub gold: Vec<Tag>,
}

/// Where the knowledge for each sentence comes from.
#[derive(Debug, Clone, Copy)]
pub enum Knowledge<'a> {
    /// No knowledge anywhere: every sample is `T` plus the separator.
    Baseline,
    Map(&'a KnowledgeMap),
}

impl<'a> Knowledge<'a> {
    fn tokens_for(&self, id: &str) -> Result<Vec<String>> {
        match self {
            Knowledge::Baseline => Ok(Vec::new()),
            Knowledge::Map(map) => map
                .get(id)
                .map(|k| k.tokens())
                .ok_or_else(|| Error::UnknownId(format!("no knowledge for {id}; run augment first"))),
        }
    }
}

/// Concatenates `T`, the separator and `Z`, cutting `Z` from its end to fit.
pub fn build_augmented(
    sentence: &AnnotatedSentence,
    knowledge: &[String],
    max_length: usize,
) -> Result<AugmentedSample> {
    let n = sentence.len();
    if n + 1 > max_length {
        return Err(Error::TooLong {
            id: sentence.id.clone(),
            tokens: n + 1,
            max: max_length,
        });
    }
    let room = max_length - n - 1;
    let mut tokens = Vec::with_capacity(n + 1 + room.min(knowledge.len()));
    tokens.extend_from_slice(&sentence.tokens);
    tokens.push(KNOWLEDGE_SEPARATOR.to_string());
    tokens.extend(knowledge.iter().take(room).cloned());
    Ok(AugmentedSample {
        id: sentence.id.clone(),
        tokens,
        boundary: n,
        gold: sentence.tags.clone(),
    })
}

fn budget(embedder: &Embedder, cfg_max: usize) -> usize {
    cfg_max.min(embedder.spec().max_length)
}

fn encode(embedder: &Embedder, sample: &AugmentedSample) -> Result<TokenReprSequence> {
    embedder.embed_tokens(&sample.tokens)?.with_boundary(sample.boundary)
}

/// Embedded, tag-encoded training data.
pub fn prepare(
    model: &CrfModel,
    embedder: &Embedder,
    corpus: &[AnnotatedSentence],
    knowledge: Knowledge,
    max_length: usize,
) -> Result<Vec<(TokenReprSequence, Vec<usize>)>> {
    let max_length = budget(embedder, max_length);
    corpus
        .iter()
        .map(|s| {
            let sample = build_augmented(s, &knowledge.tokens_for(&s.id)?, max_length)?;
            Ok((encode(embedder, &sample)?, model.tagset.encode(&sample.gold)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// Epoch whose parameters were kept: best dev F1 (earliest on ties), or
    /// the last epoch without a dev set.
    pub selected_epoch: usize,
    pub seeds: BTreeMap<String, u64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.mean_loss)
    }

    pub fn last_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }
}

/// A labelled split plus its knowledge.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub corpus: &'a [AnnotatedSentence],
    pub knowledge: Knowledge<'a>,
}

pub fn categories_of(corpus: &[AnnotatedSentence]) -> Vec<TagCategory> {
    let mut cats: Vec<TagCategory> = corpus
        .iter()
        .flat_map(|s| s.tags.iter().filter_map(|t| t.category()))
        .collect();
    cats.sort();
    cats.dedup();
    cats
}

/// Trains a fresh strict-decoding model over all four categories.
pub fn run_training(
    train: Split,
    dev: Option<Split>,
    embedder: &Embedder,
    cfg: &TrainConfig,
) -> Result<(CrfModel, TrainReport)> {
    cfg.validate()?;
    let init_seed = derive_seed(cfg.seed, "crf-init");
    let mut model = CrfModel::with_init_seed(embedder, &TagCategory::ALL, true, init_seed)?;
    let data = prepare(&model, embedder, train.corpus, train.knowledge, cfg.max_length)?;
    let mut trainer = Trainer::new(&model, cfg.clone(), data.len())?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, CrfModel)> = None;
    for _ in 0..cfg.epochs {
        let stats = trainer.run_epoch(&mut model, &data)?;
        let dev_f1 = match dev {
            Some(d) => {
                let pred = run_prediction(&model, embedder, d.corpus, d.knowledge, cfg.max_length)?;
                let f1 = score_predictions(d.corpus, &pred)?.overall.f1;
                if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                    best = Some((f1, stats.epoch, model.clone()));
                }
                Some(f1)
            }
            None => None,
        };
        log::info!("epoch {} loss {:.6} dev_f1 {:?}", stats.epoch, stats.mean_loss, dev_f1);
        epochs.push(EpochReport {
            epoch: stats.epoch,
            mean_loss: stats.mean_loss,
            dev_f1,
        });
    }
    let (selected_epoch, model) = match best {
        Some((_, epoch, m)) => (epoch, m),
        None => (cfg.epochs.saturating_sub(1), model),
    };
    let seeds = BTreeMap::from([
        ("train".to_string(), cfg.seed),
        ("crf-init".to_string(), init_seed),
        ("shuffle".to_string(), derive_seed(cfg.seed, "shuffle")),
    ]);
    Ok((
        model,
        TrainReport {
            epochs,
            selected_epoch,
            seeds,
        },
    ))
}

/// Viterbi tags (length `|T|`) per sentence id.
pub fn run_prediction(
    model: &CrfModel,
    embedder: &Embedder,
    corpus: &[AnnotatedSentence],
    knowledge: Knowledge,
    max_length: usize,
) -> Result<BTreeMap<String, Vec<Tag>>> {
    let max_length = budget(embedder, max_length);
    let mut out = BTreeMap::new();
    for s in corpus {
        let sample = build_augmented(s, &knowledge.tokens_for(&s.id)?, max_length)?;
        let tags = model.predict_tags(&encode(embedder, &sample)?)?;
        if out.insert(s.id.clone(), tags).is_some() {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }
    Ok(out)
}

/// Gold spans of `corpus` against predicted tag lists.
pub fn score_predictions(
    corpus: &[AnnotatedSentence],
    pred: &BTreeMap<String, Vec<Tag>>,
) -> Result<MetricReport> {
    let mut gold: BTreeMap<String, Vec<EntitySpan>> = BTreeMap::new();
    for s in corpus {
        gold.insert(s.id.clone(), s.spans()?);
    }
    let pred = pred
        .iter()
        .map(|(id, tags)| Ok((id.clone(), spans_from_tags(tags)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    score_spans(&gold, &pred)
}

/// Train on one split and score another (cross-dataset generalization).
pub fn train_and_evaluate(
    train: Split,
    dev: Option<Split>,
    test: Split,
    embedder: &Embedder,
    cfg: &TrainConfig,
) -> Result<(CrfModel, TrainReport, MetricReport)> {
    let (model, report) = run_training(train, dev, embedder, cfg)?;
    let pred = run_prediction(&model, embedder, test.corpus, test.knowledge, cfg.max_length)?;
    let metrics = score_predictions(test.corpus, &pred)?;
    Ok((model, report, metrics))
}

pub const SUBSAMPLES: usize = 3;
pub const TRAIN_SEEDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRun {
    pub subsample: usize,
    pub train_seed: u64,
    pub ids: Vec<String>,
    pub overall: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub size: usize,
    pub runs: Vec<FewShotRun>,
    /// Mean precision, recall and F1 over all runs.
    pub mean: Scores,
}

impl FewShotRow {
    pub fn label(&self, full: usize) -> String {
        if self.size == full {
            "full-shot".into()
        } else {
            format!("fs-{}", self.size)
        }
    }
}

/// Subsample indices for `size`, drawn without replacement, in corpus order.
pub fn subsample(len: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, size).into_vec();
    idx.sort_unstable();
    idx
}

/// For each size: 3 seeded subsamples × 3 training seeds, scored on `test`
/// and averaged. The full training set is used once per seed.
pub fn few_shot_protocol(
    train: Split,
    test: Split,
    embedder: &Embedder,
    cfg: &TrainConfig,
    sizes: &[usize],
) -> Result<Vec<FewShotRow>> {
    let total = train.corpus.len();
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > total) {
        return Err(Error::InvalidInput(format!(
            "few-shot size {bad} outside 1..={total}"
        )));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let subsamples = if size == total { 1 } else { SUBSAMPLES };
        let mut runs = Vec::with_capacity(subsamples * TRAIN_SEEDS);
        for sub in 0..subsamples {
            let seed = derive_seed(cfg.seed, &format!("subsample-{size}-{sub}"));
            let picked: Vec<AnnotatedSentence> = subsample(total, size, seed)
                .into_iter()
                .map(|i| train.corpus[i].clone())
                .collect();
            for r in 0..TRAIN_SEEDS {
                let train_seed = derive_seed(cfg.seed, &format!("train-{r}"));
                let run_cfg = TrainConfig {
                    seed: train_seed,
                    ..cfg.clone()
                };
                let split = Split {
                    corpus: &picked,
                    knowledge: train.knowledge,
                };
                let (_, _, metrics) = train_and_evaluate(split, None, test, embedder, &run_cfg)?;
                log::info!(
                    "few-shot size {size} subsample {sub} seed {r}: f1 {:.4}",
                    metrics.overall.f1
                );
                runs.push(FewShotRun {
                    subsample: sub,
                    train_seed,
                    ids: picked.iter().map(|s| s.id.clone()).collect(),
                    overall: metrics.overall,
                });
            }
        }
        let k = runs.len() as f64;
        let mean = |f: fn(&Scores) -> f64| runs.iter().map(|r| f(&r.overall)).sum::<f64>() / k;
        let avg = Scores {
            precision: mean(|s| s.precision),
            recall: mean(|s| s.recall),
            f1: mean(|s| s.f1),
            ..Scores::default()
        };
        rows.push(FewShotRow {
            size,
            runs,
            mean: avg,
        });
    }
    Ok(rows)
}

pub fn render_few_shot(rows: &[FewShotRow], full: usize) -> String {
    let table: Vec<(String, Scores)> = rows.iter().map(|r| (r.label(full), r.mean)).collect();
    render_prf_table(&table)
}

/// Everything `report` needs to re-render a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub epochs: Vec<EpochReport>,
    pub selected_epoch: Option<usize>,
    #[serde(default)]
    pub metrics: Vec<(String, MetricReport)>,
    #[serde(default)]
    pub few_shot: Vec<FewShotRow>,
    pub table: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderSpec;
    use crate::knowledge::KnowledgeText;

    fn sentence(id: &str, n: usize) -> AnnotatedSentence {
        let tokens = (0..n).map(|i| format!("w{i}")).collect();
        AnnotatedSentence::new(id, tokens, vec![Tag::O; n]).unwrap()
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("z{i}")).collect()
    }

    #[test]
    fn concatenation_and_budget() {
        let a = build_augmented(&sentence("a", 3), &words(4), 256).unwrap();
        assert_eq!(a.tokens.len(), 8);
        assert_eq!(a.boundary, 3);
        assert_eq!(a.tokens[3], KNOWLEDGE_SEPARATOR);

        let b = build_augmented(&sentence("b", 3), &[], 256).unwrap();
        assert_eq!(b.tokens.len(), 4);

        let c = build_augmented(&sentence("c", 250), &words(100), 256).unwrap();
        assert_eq!(c.tokens.len(), 256);
        assert_eq!(&c.tokens[251..], &words(5)[..]);
        assert_eq!(&c.tokens[..250], &sentence("c", 250).tokens[..]);

        let err = build_augmented(&sentence("long", 256), &[], 256).unwrap_err();
        assert!(err.to_string().contains("long"));
        assert!(build_augmented(&sentence("fits", 255), &words(3), 256).is_ok());
    }

    fn toy() -> (Vec<AnnotatedSentence>, KnowledgeMap) {
        let tok = |w: &str| w.to_string();
        let mut corpus = Vec::new();
        let mut km = KnowledgeMap::new();
        for i in 0..8 {
            let (tokens, tags) = if i % 2 == 0 {
                (vec![tok("alice"), tok("visits"), tok("paris")], vec![
                    Tag::B(TagCategory::Per),
                    Tag::O,
                    Tag::B(TagCategory::Loc),
                ])
            } else {
                (vec![tok("acme"), tok("hires")], vec![Tag::B(TagCategory::Org), Tag::O])
            };
            let id = format!("t:{i}");
            km.insert(
                id.clone(),
                KnowledgeText::new(tokens.join(" "), "h".into(), "mock".into(), 0),
            );
            corpus.push(AnnotatedSentence::new(id, tokens, tags).unwrap());
        }
        (corpus, km)
    }

    fn embedder() -> Embedder {
        Embedder::new(EmbedderSpec {
            buckets: 64,
            ..EmbedderSpec::hashed(1, 8, 8)
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 5e-2,
            epochs: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_selects_and_is_deterministic() {
        let (corpus, km) = toy();
        let emb = embedder();
        let split = Split {
            corpus: &corpus,
            knowledge: Knowledge::Map(&km),
        };
        let (m1, r1) = run_training(split, Some(split), &emb, &cfg()).unwrap();
        let (m2, r2) = run_training(split, Some(split), &emb, &cfg()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        assert_eq!(r1.epochs.len(), 6);
        let best = r1.epochs.iter().map(|e| e.dev_f1.unwrap()).fold(f64::MIN, f64::max);
        assert_eq!(r1.epochs[r1.selected_epoch].dev_f1, Some(best));

        let missing = KnowledgeMap::new();
        let bad = Split {
            corpus: &corpus,
            knowledge: Knowledge::Map(&missing),
        };
        assert!(run_training(bad, None, &emb, &cfg()).is_err());
        let base = Split {
            corpus: &corpus,
            knowledge: Knowledge::Baseline,
        };
        let (_, r) = run_training(base, None, &emb, &cfg()).unwrap();
        assert_eq!(r.selected_epoch, 5);
    }

    #[test]
    fn prediction_shapes() {
        let (corpus, km) = toy();
        let emb = embedder();
        let split = Split {
            corpus: &corpus,
            knowledge: Knowledge::Map(&km),
        };
        let (model, _) = run_training(split, None, &emb, &cfg()).unwrap();
        let pred = run_prediction(&model, &emb, &corpus, Knowledge::Map(&km), 256).unwrap();
        for s in &corpus {
            assert_eq!(pred[&s.id].len(), s.len());
            assert!(crate::corpus::is_bio2_valid(&pred[&s.id]));
        }
        assert!(run_prediction(&model, &emb, &[], Knowledge::Baseline, 256)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn few_shot_counts_runs() {
        let (corpus, km) = toy();
        let emb = embedder();
        let split = Split {
            corpus: &corpus,
            knowledge: Knowledge::Map(&km),
        };
        let cfg = TrainConfig { epochs: 2, ..cfg() };
        let rows = few_shot_protocol(split, split, &emb, &cfg, &[3, 8]).unwrap();
        assert_eq!(rows[0].runs.len(), 9);
        assert_eq!(rows[1].runs.len(), 3);
        assert_eq!(rows[1].label(8), "full-shot");
        let again = few_shot_protocol(split, split, &emb, &cfg, &[3, 8]).unwrap();
        assert_eq!(rows, again);
        let t = render_few_shot(&rows, 8);
        assert!(t.lines().nth(1).unwrap().starts_with("fs-3"));
        assert!(few_shot_protocol(split, split, &emb, &cfg, &[9]).is_err());
    }

    #[test]
    fn subsample_is_sorted_and_distinct() {
        let s = subsample(12, 10, 7);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, subsample(12, 10, 7));
    }
}
