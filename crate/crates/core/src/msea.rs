//! Similar-example selection: rank annotated exemplars by cosine similarity
//! of their fusion vectors to the query and keep the top N.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedSentence;
use crate::embedder::{Embedder, FusionVector};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: usize = 5;

/// A hand-annotated in-context example.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub id: String,
    pub text: Vec<String>,
    pub caption: String,
    pub question: String,
    /// Gold entity judgments, usually followed by a short explanation.
    pub answer: String,
    pub fusion: FusionVector,
}

/// On-disk exemplar record (JSON-lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub id: String,
    pub text: Vec<String>,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub question: String,
    pub answer: String,
}

impl ExemplarRecord {
    /// Record whose answer lists the gold entities as `surface (TYPE)` lines.
    pub fn from_sentence(sentence: &AnnotatedSentence, question: &str) -> Result<Self> {
        Ok(ExemplarRecord {
            id: sentence.id.clone(),
            text: sentence.tokens.clone(),
            caption: sentence.caption.clone().unwrap_or_default(),
            question: question.to_string(),
            answer: gold_answer(sentence)?,
        })
    }

    pub fn into_exemplar(self, embedder: &Embedder) -> Result<Exemplar> {
        if self.answer.is_empty() {
            return Err(Error::InvalidInput(format!(
                "exemplar {} has an empty answer",
                self.id
            )));
        }
        let caption = (!self.caption.is_empty()).then_some(self.caption.as_str());
        let fusion = embedder.fuse(&self.id, &self.text, caption)?;
        if fusion.dim() != embedder.spec().d {
            return Err(Error::DimensionMismatch {
                expected: embedder.spec().d,
                actual: fusion.dim(),
            });
        }
        Ok(Exemplar {
            id: self.id,
            text: self.text,
            caption: self.caption,
            question: self.question,
            answer: self.answer,
            fusion,
        })
    }
}

/// `surface (TYPE)` per gold entity, or `no entities`.
pub fn gold_answer(sentence: &AnnotatedSentence) -> Result<String> {
    let spans = sentence.spans()?;
    if spans.is_empty() {
        return Ok("no entities".to_string());
    }
    Ok(spans
        .iter()
        .map(|s| format!("{} ({})", s.surface(&sentence.tokens), s.category))
        .collect::<Vec<_>>()
        .join("\n"))
}

pub fn read_exemplars<R: BufRead>(reader: R) -> Result<Vec<ExemplarRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("exemplars", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExemplarRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: idx + 1,
            content: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl SelectionResult {
    pub fn empty() -> Self {
        SelectionResult {
            ids: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Cosine similarity. A zero-norm operand yields 0 with a logged warning.
pub fn cosine(a: &FusionVector, b: &FusionVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if a.norm() == 0.0 || b.norm() == 0.0 {
        log::warn!("cosine with a zero-norm vector, returning 0");
        return Ok(0.0);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

/// The `n` exemplars most similar to `query`, best first, ties by ascending id.
pub fn select_top_n(query: &FusionVector, exemplars: &[Exemplar], n: usize) -> Result<SelectionResult> {
    let mut scored = exemplars
        .iter()
        .map(|e| Ok((cosine(query, &e.fusion)?, e.id.as_str())))
        .collect::<Result<Vec<_>>>()?;
    let by_rank = |a: &(f64, &str), b: &(f64, &str)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    };
    let keep = n.min(scored.len());
    if keep < scored.len() && keep > 0 {
        scored.select_nth_unstable_by(keep - 1, by_rank);
        scored.truncate(keep);
    }
    scored.sort_by(by_rank);
    scored.truncate(keep);
    Ok(SelectionResult {
        ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        scores: scored.iter().map(|(s, _)| *s).collect(),
    })
}

/// Resolves a selection into exemplars, preserving selection (prompt) order.
pub fn build_context<'a>(result: &SelectionResult, exemplars: &'a [Exemplar]) -> Result<Vec<&'a Exemplar>> {
    let by_id: HashMap<&str, &Exemplar> = exemplars.iter().map(|e| (e.id.as_str(), e)).collect();
    result
        .ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownId(id.clone()))
        })
        .collect()
}
