use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use pgim::corpus::{attach_captions, parse_conll, read_captions, Bio2Mode};
use pgim::embedder::{Backend, Embedder, EmbedderSpec};
use pgim::msea::{build_context, read_exemplars, select_top_n};
use pgim::promptgen::{assemble, PromptMode, PromptTemplate};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompt").join(name)
}

fn open(name: &str) -> BufReader<fs::File> {
    BufReader::new(fs::File::open(fixture(name)).unwrap())
}

#[test]
fn assembled_prompts_match_goldens() {
    let spec = EmbedderSpec {
        backend: Backend::File,
        path: Some(fixture("fusion.vec")),
        ..EmbedderSpec::hashed(0, 3, 4)
    };
    let emb = Embedder::new(spec).unwrap();
    let exemplars: Vec<_> = read_exemplars(open("exemplars.jsonl"))
        .unwrap()
        .into_iter()
        .map(|r| r.into_exemplar(&emb).unwrap())
        .collect();
    assert_eq!(exemplars.len(), 3);
    let parsed = parse_conll(open("test.conll"), "q", Bio2Mode::Strict).unwrap();
    let caps = read_captions(open("test.captions.jsonl"), "captions").unwrap();
    let (tests, _) = attach_captions(parsed.sentences, caps).unwrap();
    assert_eq!(tests.len(), 2);
    let template = PromptTemplate::for_mode(PromptMode::Knowledge);
    for s in &tests {
        for n in [0, 2] {
            let query = emb.fuse(&s.id, &s.tokens, s.caption.as_deref()).unwrap();
            let sel = select_top_n(&query, &exemplars, n).unwrap();
            let ctx = build_context(&sel, &exemplars).unwrap();
            let doc = assemble(&template, &ctx, &s.id, &s.tokens, s.caption.as_deref());
            let golden = fs::read_to_string(fixture(&format!(
                "{}.n{n}.golden.txt",
                s.id.replace(':', "_")
            )))
            .unwrap();
            assert_eq!(doc.text, golden, "{} with {n} examples", s.id);
            assert_eq!(doc.example_count, n);
            if n == 0 {
                // No examples at all: head, blank line, test block.
                assert!(!doc.text.contains("Answer: alice"));
                assert_eq!(doc.text.matches("Text: ").count(), 1);
            }
        }
    }
}
