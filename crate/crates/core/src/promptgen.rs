//! Prompt assembly: head, in-context example blocks, then the open test block.
//!
//! ```text
//! {head}
//!
//! Text: ...\nImage: ...\nQuestion: ...\nAnswer: ...\n   (one block per example)
//! Text: ...\nImage: ...\nQuestion: ...\nAnswer: _
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::msea::Exemplar;

pub const KNOWLEDGE_HEAD: &str = "You are an expert in named entity recognition. Each example below \
gives a short social media text and a description of the image posted with it. Identify the named \
entities in the text, classify each one as a person (PER), location (LOC), organization (ORG) or \
other (OTHER), and explain the reasoning behind each judgment. The image description is only a \
hint: judge by yourself whether it is relevant to the text before using it.";

pub const KNOWLEDGE_QUESTION: &str =
    "Which named entities are mentioned in the text, what are their types, and why?";

pub const DIRECT_HEAD: &str = "You are an expert in named entity recognition. Each example below \
gives a short social media text and a description of the image posted with it. Extract the named \
entities in the text. Write one entity per line in the form \"entity (TYPE)\" where TYPE is one of \
PER, LOC, ORG or OTHER. Write nothing else; if there are no entities, write \"no entities\".";

pub const DIRECT_QUESTION: &str = "What are the named entities in the text and their types?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Entity judgments with reasoning (auxiliary knowledge).
    Knowledge,
    /// Entity extraction only (direct prediction baselines).
    Direct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub head: String,
    pub question: String,
    pub mode: PromptMode,
}

impl PromptTemplate {
    pub fn for_mode(mode: PromptMode) -> Self {
        match mode {
            PromptMode::Knowledge => PromptTemplate {
                head: KNOWLEDGE_HEAD.to_string(),
                question: KNOWLEDGE_QUESTION.to_string(),
                mode,
            },
            PromptMode::Direct => PromptTemplate {
                head: DIRECT_HEAD.to_string(),
                question: DIRECT_QUESTION.to_string(),
                mode,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head.trim().is_empty() || self.question.trim().is_empty() {
            return Err(Error::Config("template head and question must be non-empty".into()));
        }
        Ok(())
    }

    /// Reads a flat TOML file (`mode`, `head`, `question`); missing keys take
    /// the defaults of the given mode.
    pub fn from_toml(src: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            mode: Option<PromptMode>,
            head: Option<String>,
            question: Option<String>,
        }
        let raw: Raw = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        let mut t = PromptTemplate::for_mode(raw.mode.unwrap_or(PromptMode::Knowledge));
        if let Some(h) = raw.head {
            t.head = h;
        }
        if let Some(q) = raw.question {
            t.question = q;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PromptTemplate::from_toml(&src)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDoc {
    pub text: String,
    pub example_count: usize,
    pub test_id: String,
    /// Hex SHA-256 of `text`.
    pub content_hash: String,
}

impl PromptDoc {
    pub fn new(text: String, example_count: usize, test_id: impl Into<String>) -> Self {
        let content_hash = content_hash(&text);
        PromptDoc {
            text,
            example_count,
            test_id: test_id.into(),
            content_hash,
        }
    }
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn render_example(e: &Exemplar, question: &str) -> String {
    format!(
        "Text: {}\nImage: {}\nQuestion: {}\nAnswer: {}\n",
        e.text.join(" "),
        e.caption,
        question,
        e.answer
    )
}

pub fn render_test(tokens: &[String], caption: Option<&str>, question: &str) -> String {
    format!(
        "Text: {}\nImage: {}\nQuestion: {}\nAnswer: ",
        tokens.join(" "),
        caption.unwrap_or(""),
        question
    )
}

pub fn assemble(
    template: &PromptTemplate,
    context: &[&Exemplar],
    test_id: &str,
    tokens: &[String],
    caption: Option<&str>,
) -> PromptDoc {
    let mut text = String::with_capacity(template.head.len() + 256 * (context.len() + 1));
    text.push_str(&template.head);
    text.push_str("\n\n");
    for e in context {
        text.push_str(&render_example(e, &template.question));
        text.push('\n');
    }
    text.push_str(&render_test(tokens, caption, &template.question));
    PromptDoc::new(text, context.len(), test_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::FusionVector;

    fn ex(id: &str, tokens: &[&str], caption: &str, answer: &str) -> Exemplar {
        Exemplar {
            id: id.into(),
            text: tokens.iter().map(|s| s.to_string()).collect(),
            caption: caption.into(),
            question: String::new(),
            answer: answer.into(),
            fusion: FusionVector::new(vec![1.0]),
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn example_block() {
        let e = ex("e", &["Big", "B"], "a man", "A.");
        assert_eq!(
            render_example(&e, "Q?"),
            "Text: Big B\nImage: a man\nQuestion: Q?\nAnswer: A.\n"
        );
        let e = ex("e", &["x"], "", "line1\nline2");
        assert_eq!(
            render_example(&e, "Q?"),
            "Text: x\nImage: \nQuestion: Q?\nAnswer: line1\nline2\n"
        );
    }

    #[test]
    fn test_block() {
        assert_eq!(
            render_test(&toks("hi"), Some("c"), "Q?"),
            "Text: hi\nImage: c\nQuestion: Q?\nAnswer: "
        );
        assert_eq!(
            render_test(&toks("U.S.-based"), None, "Q?"),
            "Text: U.S.-based\nImage: \nQuestion: Q?\nAnswer: "
        );
    }

    #[test]
    fn assembly_order_and_hash() {
        let t = PromptTemplate {
            head: "H".into(),
            question: "Q?".into(),
            mode: PromptMode::Knowledge,
        };
        let doc = assemble(&t, &[], "s:0", &toks("hi"), None);
        assert_eq!(doc.text, "H\n\nText: hi\nImage: \nQuestion: Q?\nAnswer: ");
        assert_eq!(doc.example_count, 0);

        let a = ex("a", &["one"], "c1", "A1");
        let b = ex("b", &["two"], "c2", "A2");
        let doc = assemble(&t, &[&b, &a], "s:0", &toks("hi"), Some("c"));
        assert_eq!(
            doc.text,
            "H\n\nText: two\nImage: c2\nQuestion: Q?\nAnswer: A2\n\n\
             Text: one\nImage: c1\nQuestion: Q?\nAnswer: A1\n\n\
             Text: hi\nImage: c\nQuestion: Q?\nAnswer: "
        );
        assert!(doc.text.ends_with("Answer: "));
        let again = assemble(&t, &[&b, &a], "s:0", &toks("hi"), Some("c"));
        assert_eq!(doc.content_hash, again.content_hash);
        assert_eq!(doc.content_hash, content_hash(&doc.text));
        assert_eq!(doc.content_hash.len(), 64);
    }

    #[test]
    fn template_config() {
        let t = PromptTemplate::from_toml("# comment\nmode = \"direct\"\nquestion = \"Q?\"\n").unwrap();
        assert_eq!(t.mode, PromptMode::Direct);
        assert_eq!(t.head, DIRECT_HEAD);
        assert_eq!(t.question, "Q?");
        assert!(PromptTemplate::from_toml("head = \"\"").is_err());
        assert!(PromptTemplate::from_toml("bogus = 1").is_err());
        assert_eq!(
            PromptTemplate::from_toml("").unwrap(),
            PromptTemplate::for_mode(PromptMode::Knowledge)
        );
    }
}
