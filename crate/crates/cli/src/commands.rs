use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use pgim::corpus::{
    attach_captions, parse_conll, read_captions, read_jsonl, write_jsonl, AnnotatedSentence,
    Bio2Mode, Tag, TagCategory,
};
use pgim::crf::{load_model, save_model};
use pgim::embedder::{precompute_store, Embedder, FusionStore};
use pgim::eval::{render_table, score_direct, MetricReport};
use pgim::knowledge::{
    parse_direct, read_knowledge, write_knowledge, write_manifest, Augmenter, Engine,
    KnowledgeMap, MockEngine, MockFallback, OpenAiEngine, ResponseCache,
};
use pgim::msea::{build_context, read_exemplars, select_top_n, Exemplar, SelectionResult};
use pgim::pipeline::{
    few_shot_protocol, render_few_shot, run_prediction, run_training, score_predictions,
    train_and_evaluate, EpochReport, Knowledge, RunManifest, Split,
};
use pgim::promptgen::{assemble, PromptDoc, PromptMode, PromptTemplate};
use pgim::seeds::derive_seed;
use serde::Serialize;

use crate::config::{EngineKind, Settings};
use crate::workdir::{open, require, write, Workdir};
use crate::{Cli, Command};

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Embed { .. } => "embed",
            Command::Retrieve { .. } => "retrieve",
            Command::Promptgen { .. } => "promptgen",
            Command::Augment { .. } => "augment",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Fewshot { .. } => "fewshot",
            Command::Crossdata { .. } => "crossdata",
            Command::Report { .. } => "report",
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let s = Settings::resolve(file.as_deref(), &cli.overrides)?;
    let wd = Workdir::new(cli.workdir)?;
    let name = cli.command.name();
    write(
        &wd.snapshot(name),
        format!("# effective configuration of the last `pgim {name}`\n{}", s.to_toml()?),
    )?;
    log::info!("pgim {name} in {}", wd.root().display());
    match cli.command {
        Command::Ingest {
            conll,
            captions,
            split,
            source,
            repair,
        } => ingest(&wd, conll, captions, &split, source, repair),
        Command::Embed { split } => embed(&s, &wd, &split),
        Command::Retrieve { split, id, dry_run } => retrieve(&s, &wd, &split, id, dry_run),
        Command::Promptgen { split, id, dry_run } => promptgen(&s, &wd, &split, id, dry_run),
        Command::Augment { split } => augment(&s, &wd, &split),
        Command::Train { split, dev } => train(&s, &wd, &split, dev),
        Command::Predict { split } => predict(&s, &wd, &split),
        Command::Evaluate { split, direct } => evaluate(&s, &wd, &split, direct),
        Command::Fewshot { train, test, sizes } => fewshot(&s, &wd, &train, &test, &sizes),
        Command::Crossdata { train, test } => crossdata(&s, &wd, &train, &test),
        Command::Report { manifests } => report(&wd, manifests),
    }
}

fn ingest(
    wd: &Workdir,
    conll: PathBuf,
    captions: Option<PathBuf>,
    split: &str,
    source: Option<String>,
    repair: bool,
) -> Result<()> {
    let source = source.unwrap_or_else(|| split.to_string());
    let mode = if repair { Bio2Mode::Repair } else { Bio2Mode::Strict };
    let reader = BufReader::new(
        fs::File::open(&conll).with_context(|| format!("opening {}", conll.display()))?,
    );
    let parsed = parse_conll(reader, &source, mode)
        .with_context(|| format!("parsing {}", conll.display()))?;
    if parsed.repairs > 0 {
        log::warn!("repaired {} BIO2 violations", parsed.repairs);
    }
    let mut sentences = parsed.sentences;
    if let Some(path) = captions {
        let reader = BufReader::new(
            fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?,
        );
        let (with, summary) = attach_captions(sentences, read_captions(reader, &source)?)?;
        log::info!(
            "captions: {} matched, {} unmatched",
            summary.matched,
            summary.unmatched
        );
        sentences = with;
    }
    write(&wd.corpus(split), write_jsonl(&sentences)?)?;
    log::info!("{split}: {} sentences", sentences.len());
    Ok(())
}

fn load_corpus(wd: &Workdir, split: &str) -> Result<Vec<AnnotatedSentence>> {
    Ok(read_jsonl(open(&wd.corpus(split), "ingest")?, split)?)
}

fn load_knowledge(wd: &Workdir, split: &str) -> Result<KnowledgeMap> {
    read_knowledge(open(&wd.knowledge(split), "augment")?)
        .with_context(|| format!("reading knowledge of {split}"))
}

fn embed(s: &Settings, wd: &Workdir, split: &str) -> Result<()> {
    let corpus = load_corpus(wd, split)?;
    let emb = Embedder::new(s.embedder_spec())?;
    let store = precompute_store(&corpus, &emb)?;
    store.save(&wd.fusion(split))?;
    log::info!("{split}: {} fusion vectors of dimension {}", store.len(), store.dim());
    Ok(())
}

fn template(s: &Settings) -> Result<PromptTemplate> {
    match &s.template {
        Some(p) => Ok(PromptTemplate::load(p)?),
        None => Ok(PromptTemplate::for_mode(s.prompt_mode())),
    }
}

/// Query embedder over the split's stored fusion vectors plus the exemplars.
fn retrieval_setup(s: &Settings, wd: &Workdir, split: &str) -> Result<(Embedder, Vec<Exemplar>)> {
    let path = s
        .exemplars
        .as_ref()
        .context("no exemplar file; set `exemplars` in the config or pass --exemplars")?;
    let reader = BufReader::new(
        fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let records = read_exemplars(reader)?;
    let fusion = wd.fusion(split);
    require(&fusion, "embed")?;
    let mut store = FusionStore::load(&fusion)?;
    let base = Embedder::new(s.embedder_spec())?;
    for r in &records {
        if store.get(&r.id).is_none() {
            let caption = (!r.caption.is_empty()).then_some(r.caption.as_str());
            let v = base.fuse(&r.id, &r.text, caption)?;
            store.insert(r.id.clone(), v.values().iter().map(|&x| x as f32).collect())?;
        }
    }
    let queries = Embedder::from_store(s.embedder_spec(), store)?;
    let exemplars = records
        .into_iter()
        .map(|r| r.into_exemplar(&queries))
        .collect::<pgim::Result<Vec<_>>>()?;
    Ok((queries, exemplars))
}

fn select(
    q: &Embedder,
    exemplars: &[Exemplar],
    sentence: &AnnotatedSentence,
    n: usize,
) -> Result<SelectionResult> {
    if n == 0 {
        return Ok(SelectionResult::empty());
    }
    let query = q.fuse(&sentence.id, &sentence.tokens, sentence.caption.as_deref())?;
    Ok(select_top_n(&query, exemplars, n)?)
}

fn prompt(
    t: &PromptTemplate,
    exemplars: &[Exemplar],
    sel: &SelectionResult,
    sentence: &AnnotatedSentence,
) -> Result<PromptDoc> {
    let context = build_context(sel, exemplars)?;
    Ok(assemble(
        t,
        &context,
        &sentence.id,
        &sentence.tokens,
        sentence.caption.as_deref(),
    ))
}

fn pick<'a>(corpus: &'a [AnnotatedSentence], id: &str) -> Result<&'a AnnotatedSentence> {
    corpus
        .iter()
        .find(|x| x.id == id)
        .with_context(|| format!("no sentence with id {id}"))
}

fn retrieve(s: &Settings, wd: &Workdir, split: &str, id: Option<String>, dry_run: bool) -> Result<()> {
    let corpus = load_corpus(wd, split)?;
    let (q, exemplars) = retrieval_setup(s, wd, split)?;
    if let Some(id) = id {
        let sentence = pick(&corpus, &id)?;
        let sel = select(&q, &exemplars, sentence, s.n)?;
        if dry_run {
            print!("{}", prompt(&template(s)?, &exemplars, &sel, sentence)?.text);
        } else {
            for (eid, score) in sel.ids.iter().zip(&sel.scores) {
                println!("{eid}\t{score:.6}");
            }
        }
        return Ok(());
    }
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        exemplars: Vec<String>,
        scores: Vec<f64>,
    }
    let mut out = String::new();
    for sentence in &corpus {
        let sel = select(&q, &exemplars, sentence, s.n)?;
        out.push_str(&serde_json::to_string(&Row {
            id: &sentence.id,
            exemplars: sel.ids,
            scores: sel.scores,
        })?);
        out.push('\n');
    }
    write(&wd.retrieval(split), out)
}

fn promptgen(s: &Settings, wd: &Workdir, split: &str, id: Option<String>, dry_run: bool) -> Result<()> {
    let corpus = load_corpus(wd, split)?;
    let (q, exemplars) = retrieval_setup(s, wd, split)?;
    let t = template(s)?;
    let chosen: Vec<&AnnotatedSentence> = match &id {
        Some(id) => vec![pick(&corpus, id)?],
        None => corpus.iter().collect(),
    };
    if dry_run {
        for sentence in chosen {
            let sel = select(&q, &exemplars, sentence, s.n)?;
            print!("{}", prompt(&t, &exemplars, &sel, sentence)?.text);
        }
        return Ok(());
    }
    let mut out = String::new();
    for sentence in chosen {
        let sel = select(&q, &exemplars, sentence, s.n)?;
        out.push_str(&serde_json::to_string(&prompt(&t, &exemplars, &sel, sentence)?)?);
        out.push('\n');
    }
    write(&wd.prompts(split), out)
}

fn engine(s: &Settings) -> Result<Box<dyn Engine>> {
    Ok(match s.engine {
        EngineKind::Mock => {
            let fallback = match &s.mock_response {
                Some(r) => MockFallback::Fixed(r.clone()),
                None => MockFallback::EchoText,
            };
            let mut m = MockEngine::new(fallback);
            if let Some(p) = &s.mock_fixtures {
                let src = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                m = m.load_fixtures(&src)?;
            }
            Box::new(m)
        }
        EngineKind::Openai => Box::new(OpenAiEngine::new(&s.engine_config())?),
    })
}

fn augment(s: &Settings, wd: &Workdir, split: &str) -> Result<()> {
    let corpus = load_corpus(wd, split)?;
    let (q, exemplars) = retrieval_setup(s, wd, split)?;
    let t = template(s)?;
    let engine = engine(s)?;
    let cache = ResponseCache::open(s.cache_dir.clone().unwrap_or_else(|| wd.cache()))?;
    let cfg = s.engine_config();
    let augmenter = Augmenter {
        exemplars: &exemplars,
        template: &t,
        embedder: &q,
        engine: engine.as_ref(),
        cache: &cache,
        cfg: &cfg,
        n: s.n,
    };
    let outcome = augmenter.augment(&corpus);
    let direct = t.mode == PromptMode::Direct;
    let target = if direct { wd.direct(split) } else { wd.knowledge(split) };
    write(
        &target,
        write_knowledge(outcome.knowledge.iter().map(|(id, k)| (id, k)))?,
    )?;
    write(&wd.manifest(split, direct), write_manifest(&outcome.manifest())?)?;
    log::info!(
        "{split}: {} answers written to {}",
        outcome.knowledge.len(),
        target.display()
    );
    if !outcome.failures.is_empty() {
        bail!(
            "{} of {} sentences failed (first: {} — {}); finished answers are cached, re-run augment to resume",
            outcome.failures.len(),
            corpus.len(),
            outcome.failures[0].0,
            outcome.failures[0].1
        );
    }
    Ok(())
}

fn seeds(s: &Settings, extra: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
    let mut out = extra.clone();
    out.insert("master".into(), s.seed);
    out.insert("embedder".into(), derive_seed(s.seed, "embedder"));
    out
}

fn epoch_table(epochs: &[EpochReport], selected: usize) -> String {
    let mut t = String::from("epoch  mean_nll    dev_f1\n");
    for e in epochs {
        let dev = e.dev_f1.map_or("-".to_string(), |f| format!("{:.2}", f * 100.0));
        let mark = if e.epoch == selected { " *" } else { "" };
        let _ = writeln!(t, "{:>5} {:>9.5} {:>9}{mark}", e.epoch, e.mean_loss, dev);
    }
    t
}

fn save_run(wd: &Workdir, name: &str, manifest: &RunManifest) -> Result<()> {
    write(&wd.run(name), serde_json::to_string_pretty(manifest)?)
}

fn train(s: &Settings, wd: &Workdir, split: &str, dev: Option<String>) -> Result<()> {
    let tr = split_data(s, wd, split)?;
    let dv = dev.as_deref().map(|d| split_data(s, wd, d)).transpose()?;
    let (train_split, dev_split) = (as_split(&tr), dv.as_ref().map(as_split));
    let emb = Embedder::new(s.embedder_spec())?;
    let (model, report) = run_training(train_split, dev_split, &emb, &s.train_config())?;
    let path = s.model_file.clone().unwrap_or_else(|| wd.model());
    save_model(&model, &path)?;
    log::info!(
        "saved {} (epoch {} selected, final mean NLL {:.5})",
        path.display(),
        report.selected_epoch,
        report.last_loss()
    );
    let table = epoch_table(&report.epochs, report.selected_epoch);
    print!("{table}");
    save_run(wd, "train", &RunManifest {
        command: "train".into(),
        config: serde_json::to_value(s)?,
        seeds: seeds(s, &report.seeds),
        epochs: report.epochs,
        selected_epoch: Some(report.selected_epoch),
        metrics: Vec::new(),
        few_shot: Vec::new(),
        table,
    })
}

fn predict(s: &Settings, wd: &Workdir, split: &str) -> Result<()> {
    let path = s.model_file.clone().unwrap_or_else(|| wd.model());
    require(&path, "train")?;
    let model = load_model(&path)?;
    let emb = Embedder::new(model.meta.embedder.clone())?;
    let corpus = load_corpus(wd, split)?;
    let km = if s.baseline { None } else { Some(load_knowledge(wd, split)?) };
    let knowledge = km.as_ref().map_or(Knowledge::Baseline, Knowledge::Map);
    let pred = run_prediction(&model, &emb, &corpus, knowledge, s.max_length)?;
    let tagged: Vec<AnnotatedSentence> = corpus
        .into_iter()
        .map(|mut x| {
            x.tags = pred[&x.id].clone();
            x
        })
        .collect();
    write(&wd.predictions(split), write_jsonl(&tagged)?)?;
    log::info!("{split}: tagged {} sentences", tagged.len());
    Ok(())
}

fn gold_entities(corpus: &[AnnotatedSentence]) -> Result<BTreeMap<String, Vec<(String, TagCategory)>>> {
    corpus
        .iter()
        .map(|x| {
            let spans = x.spans()?;
            Ok((
                x.id.clone(),
                spans.iter().map(|sp| (sp.surface(&x.tokens), sp.category)).collect(),
            ))
        })
        .collect()
}

fn evaluate(s: &Settings, wd: &Workdir, split: &str, direct: bool) -> Result<()> {
    let gold = load_corpus(wd, split)?;
    let report: MetricReport = if direct {
        let answers = read_knowledge(open(&wd.direct(split), "augment --prompt-mode direct")?)?;
        let mut skipped = 0;
        let pred = answers
            .iter()
            .map(|(id, k)| {
                let parsed = parse_direct(&k.content);
                skipped += parsed.skipped;
                (id.clone(), parsed.prediction)
            })
            .collect();
        if skipped > 0 {
            log::warn!("{skipped} answer lines could not be parsed");
        }
        score_direct(&gold_entities(&gold)?, &pred, s.case_insensitive)
    } else {
        let tagged = read_jsonl(open(&wd.predictions(split), "predict")?, split)?;
        let pred: BTreeMap<String, Vec<Tag>> =
            tagged.into_iter().map(|x| (x.id, x.tags)).collect();
        score_predictions(&gold, &pred)?
    };
    let label = if direct { format!("{split} (direct)") } else { split.to_string() };
    let table = render_table(&[(label.clone(), report.clone())]);
    print!("{table}");
    write(&wd.metrics(split), serde_json::to_string_pretty(&report)?)?;
    save_run(wd, "evaluate", &RunManifest {
        command: "evaluate".into(),
        config: serde_json::to_value(s)?,
        seeds: seeds(s, &BTreeMap::new()),
        epochs: Vec::new(),
        selected_epoch: None,
        metrics: vec![(label, report)],
        few_shot: Vec::new(),
        table,
    })
}

fn split_data(s: &Settings, wd: &Workdir, split: &str) -> Result<(Vec<AnnotatedSentence>, Option<KnowledgeMap>)> {
    let corpus = load_corpus(wd, split)?;
    let km = if s.baseline { None } else { Some(load_knowledge(wd, split)?) };
    Ok((corpus, km))
}

fn as_split<'a>(data: &'a (Vec<AnnotatedSentence>, Option<KnowledgeMap>)) -> Split<'a> {
    Split {
        corpus: &data.0,
        knowledge: data.1.as_ref().map_or(Knowledge::Baseline, Knowledge::Map),
    }
}

fn fewshot(s: &Settings, wd: &Workdir, train: &str, test: &str, sizes: &[usize]) -> Result<()> {
    let tr = split_data(s, wd, train)?;
    let te = split_data(s, wd, test)?;
    let emb = Embedder::new(s.embedder_spec())?;
    let rows = few_shot_protocol(as_split(&tr), as_split(&te), &emb, &s.train_config(), sizes)?;
    let table = render_few_shot(&rows, tr.0.len());
    print!("{table}");
    for r in &rows {
        log::info!("size {}: {} runs averaged", r.size, r.runs.len());
    }
    save_run(wd, "fewshot", &RunManifest {
        command: "fewshot".into(),
        config: serde_json::to_value(s)?,
        seeds: seeds(s, &BTreeMap::new()),
        epochs: Vec::new(),
        selected_epoch: None,
        metrics: Vec::new(),
        few_shot: rows,
        table,
    })
}

fn crossdata(s: &Settings, wd: &Workdir, train: &str, test: &str) -> Result<()> {
    let tr = split_data(s, wd, train)?;
    let te = split_data(s, wd, test)?;
    let emb = Embedder::new(s.embedder_spec())?;
    let (_, report, metrics) =
        train_and_evaluate(as_split(&tr), None, as_split(&te), &emb, &s.train_config())?;
    let label = format!("{train} -> {test}");
    let table = render_table(&[(label.clone(), metrics.clone())]);
    print!("{table}");
    save_run(wd, "crossdata", &RunManifest {
        command: "crossdata".into(),
        config: serde_json::to_value(s)?,
        seeds: seeds(s, &report.seeds),
        selected_epoch: Some(report.selected_epoch),
        epochs: report.epochs,
        metrics: vec![(label, metrics)],
        few_shot: Vec::new(),
        table,
    })
}

fn report(wd: &Workdir, manifests: Vec<PathBuf>) -> Result<()> {
    let paths = if manifests.is_empty() {
        let dir = wd.runs();
        require(&dir, "train / evaluate / fewshot / crossdata")?;
        let mut v: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        manifests
    };
    for p in paths {
        let src = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let m: RunManifest =
            serde_json::from_str(&src).with_context(|| format!("parsing {}", p.display()))?;
        println!("== {} ({}) ==", m.command, p.display());
        if let Some(e) = m.selected_epoch {
            println!("selected epoch: {e}");
        }
        print!("{}", m.table);
    }
    Ok(())
}
