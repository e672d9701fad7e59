//! BIO2-tagged corpora: CoNLL ingestion, caption sidecars, and the
//! conversion between tag sequences and entity spans.
//!
//! A CoNLL file holds one `token<ws>tag` pair per line with blank lines
//! between sentences. Lines of the form `IMGID:<id>` (the Twitter MNER
//! distribution format) are accepted as sentence metadata.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entity category. `OTH`, `OTHER` and `MISC` all parse to [`TagCategory::Other`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TagCategory {
    Per,
    Loc,
    Org,
    Other,
}

impl TagCategory {
    pub const ALL: [TagCategory; 4] = [
        TagCategory::Per,
        TagCategory::Loc,
        TagCategory::Org,
        TagCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TagCategory::Per => "PER",
            TagCategory::Loc => "LOC",
            TagCategory::Org => "ORG",
            TagCategory::Other => "OTHER",
        }
    }

    /// Case-insensitive parse, used for free-form LLM answers.
    pub fn parse_ci(s: &str) -> Option<Self> {
        s.trim().to_ascii_uppercase().parse().ok()
    }
}

impl fmt::Display for TagCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TagCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PER" => Ok(TagCategory::Per),
            "LOC" => Ok(TagCategory::Loc),
            "ORG" => Ok(TagCategory::Org),
            "OTHER" | "OTH" | "MISC" => Ok(TagCategory::Other),
            _ => Err(Error::InvalidTag {
                line: 0,
                tag: s.to_string(),
            }),
        }
    }
}

impl TryFrom<String> for TagCategory {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TagCategory> for String {
    fn from(c: TagCategory) -> String {
        c.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Tag {
    O,
    B(TagCategory),
    I(TagCategory),
}

impl Tag {
    pub fn category(self) -> Option<TagCategory> {
        match self {
            Tag::O => None,
            Tag::B(c) | Tag::I(c) => Some(c),
        }
    }

    /// Whether `self` may directly follow `prev` (`None` = sentence start) under BIO2.
    pub fn may_follow(self, prev: Option<Tag>) -> bool {
        match self {
            Tag::I(c) => matches!(prev, Some(Tag::B(p)) | Some(Tag::I(p)) if p == c),
            _ => true,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(c) => write!(f, "B-{c}"),
            Tag::I(c) => write!(f, "I-{c}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = || Error::InvalidTag {
            line: 0,
            tag: s.to_string(),
        };
        if s == "O" {
            return Ok(Tag::O);
        }
        let (prefix, cat) = s.split_once('-').ok_or_else(invalid)?;
        let cat: TagCategory = cat.parse().map_err(|_| invalid())?;
        match prefix {
            "B" => Ok(Tag::B(cat)),
            "I" => Ok(Tag::I(cat)),
            _ => Err(invalid()),
        }
    }
}

impl TryFrom<String> for Tag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Tag> for String {
    fn from(t: Tag) -> String {
        t.to_string()
    }
}

/// Checks BIO2 validity, returning the index of the first violation.
pub fn first_bio2_violation(tags: &[Tag]) -> Option<usize> {
    let mut prev = None;
    for (i, &t) in tags.iter().enumerate() {
        if !t.may_follow(prev) {
            return Some(i);
        }
        prev = Some(t);
    }
    None
}

pub fn is_bio2_valid(tags: &[Tag]) -> bool {
    first_bio2_violation(tags).is_none()
}

/// Rewrites every orphan `I-X` to `B-X`; returns the number of rewrites.
pub fn repair_bio2(tags: &mut [Tag]) -> usize {
    let mut repairs = 0;
    let mut prev = None;
    for t in tags.iter_mut() {
        if !t.may_follow(prev) {
            if let Tag::I(c) = *t {
                *t = Tag::B(c);
                repairs += 1;
            }
        }
        prev = Some(*t);
    }
    repairs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

impl AnnotatedSentence {
    /// Builds a sentence, enforcing shape and strict BIO2 validity.
    pub fn new(id: impl Into<String>, tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        let sentence = AnnotatedSentence {
            id: id.into(),
            tokens,
            tags,
            caption: None,
            image_id: None,
        };
        sentence.validate()?;
        Ok(sentence)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidInput(format!("sentence {} is empty", self.id)));
        }
        if self.tokens.len() != self.tags.len() {
            return Err(Error::InvalidInput(format!(
                "sentence {}: {} tokens but {} tags",
                self.id,
                self.tokens.len(),
                self.tags.len()
            )));
        }
        if let Some(tok) = self
            .tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::InvalidInput(format!(
                "sentence {}: bad token {tok:?}",
                self.id
            )));
        }
        if let Some(i) = first_bio2_violation(&self.tags) {
            return Err(Error::InvalidSequence(format!(
                "sentence {}: {} at position {i} has no valid predecessor",
                self.id, self.tags[i]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn spans(&self) -> Result<Vec<EntitySpan>> {
        spans_from_tags(&self.tags)
    }
}

/// Half-open token range `[start, end)` labelled with a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub category: TagCategory,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, category: TagCategory) -> Self {
        EntitySpan {
            start,
            end,
            category,
        }
    }

    /// Space-joined surface string of the span over `tokens`.
    pub fn surface(&self, tokens: &[String]) -> String {
        tokens[self.start..self.end].join(" ")
    }
}

pub fn spans_from_tags(tags: &[Tag]) -> Result<Vec<EntitySpan>> {
    if let Some(i) = first_bio2_violation(tags) {
        return Err(Error::InvalidSequence(format!(
            "{} at position {i} has no valid predecessor",
            tags[i]
        )));
    }
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::I(_) => {
                if let Some(span) = open.as_mut() {
                    span.end = i + 1;
                }
            }
            Tag::B(c) => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(i, i + 1, c));
            }
            Tag::O => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    Ok(spans)
}

pub fn tags_from_spans(spans: &[EntitySpan], n: usize) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::O; n];
    let mut taken = vec![false; n];
    for span in spans {
        if span.start >= span.end || span.end > n {
            return Err(Error::InvalidSpan(format!(
                "({}, {}, {}) out of range for length {n}",
                span.start, span.end, span.category
            )));
        }
        if taken[span.start..span.end].iter().any(|&t| t) {
            return Err(Error::InvalidSpan(format!(
                "({}, {}, {}) overlaps another span",
                span.start, span.end, span.category
            )));
        }
        taken[span.start..span.end].iter_mut().for_each(|t| *t = true);
        tags[span.start] = Tag::B(span.category);
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = Tag::I(span.category);
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Bio2Mode {
    #[default]
    Strict,
    Repair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCorpus {
    pub sentences: Vec<AnnotatedSentence>,
    pub repairs: usize,
}

struct PendingSentence {
    tokens: Vec<String>,
    tags: Vec<Tag>,
    lines: Vec<usize>,
    image_id: Option<String>,
}

impl PendingSentence {
    fn new() -> Self {
        PendingSentence {
            tokens: Vec::new(),
            tags: Vec::new(),
            lines: Vec::new(),
            image_id: None,
        }
    }

    fn is_empty(&self) -> bool {
        self.tokens.is_empty() && self.image_id.is_none()
    }
}

/// Parses a CoNLL stream. Sentence ids are `<source>:<ordinal>`, ordinals from 0.
pub fn parse_conll<R: BufRead>(reader: R, source: &str, mode: Bio2Mode) -> Result<ParsedCorpus> {
    let mut sentences = Vec::new();
    let mut repairs = 0;
    let mut pending = PendingSentence::new();

    let mut finish = |pending: &mut PendingSentence, line_no: usize| -> Result<()> {
        let p = std::mem::replace(pending, PendingSentence::new());
        if p.tokens.is_empty() {
            if p.image_id.is_some() {
                return Err(Error::MalformedLine {
                    line: line_no,
                    content: "IMGID line without tokens".into(),
                });
            }
            return Ok(());
        }
        let mut tags = p.tags;
        match mode {
            Bio2Mode::Strict => {
                if let Some(i) = first_bio2_violation(&tags) {
                    return Err(Error::Bio2Violation {
                        line: p.lines[i],
                        tag: tags[i].to_string(),
                    });
                }
            }
            Bio2Mode::Repair => repairs += repair_bio2(&mut tags),
        }
        sentences.push(AnnotatedSentence {
            id: format!("{source}:{}", sentences.len()),
            tokens: p.tokens,
            tags,
            caption: None,
            image_id: p.image_id,
        });
        Ok(())
    };

    let mut last_line = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            finish(&mut pending, line_no)?;
            continue;
        }
        if let Some(img) = line.strip_prefix("IMGID:") {
            if !pending.is_empty() {
                return Err(Error::MalformedLine {
                    line: line_no,
                    content: line.to_string(),
                });
            }
            pending.image_id = Some(img.trim().to_string());
            continue;
        }
        let malformed = || Error::MalformedLine {
            line: line_no,
            content: line.to_string(),
        };
        let (token, rest) = line.split_once([' ', '\t']).ok_or_else(malformed)?;
        let tag_str = rest.trim_matches([' ', '\t']);
        if token.is_empty() || tag_str.is_empty() || tag_str.contains([' ', '\t']) {
            return Err(malformed());
        }
        let tag: Tag = tag_str.parse().map_err(|_| Error::InvalidTag {
            line: line_no,
            tag: tag_str.to_string(),
        })?;
        pending.tokens.push(token.to_string());
        pending.tags.push(tag);
        pending.lines.push(line_no);
    }
    finish(&mut pending, last_line)?;
    Ok(ParsedCorpus { sentences, repairs })
}

/// Inverse of [`parse_conll`]: tab-delimited, one blank line after each sentence.
pub fn write_conll(sentences: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        if let Some(img) = &s.image_id {
            out.push_str("IMGID:");
            out.push_str(img);
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptionSummary {
    pub matched: usize,
    pub unmatched: usize,
}

#[derive(Deserialize, Serialize)]
struct CaptionRecord {
    id: String,
    caption: String,
}

/// Reads a JSON-lines caption sidecar, keeping file order.
pub fn read_captions<R: BufRead>(reader: R, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: idx + 1,
            content: e.to_string(),
        })?;
        out.push((rec.id, rec.caption));
    }
    Ok(out)
}

/// Attaches captions by sentence id. Duplicate ids in `captions` are an error.
pub fn attach_captions<I>(
    mut sentences: Vec<AnnotatedSentence>,
    captions: I,
) -> Result<(Vec<AnnotatedSentence>, CaptionSummary)>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut map = BTreeMap::new();
    for (id, caption) in captions {
        if map.insert(id.clone(), caption).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    let mut summary = CaptionSummary::default();
    let mut seen = HashSet::new();
    for s in &mut sentences {
        if let Some(c) = map.get(&s.id) {
            s.caption = Some(c.clone());
            seen.insert(s.id.clone());
        }
    }
    summary.matched = seen.len();
    summary.unmatched = map.len() - seen.len();
    Ok((sentences, summary))
}

/// JSON-lines corpus dump (one [`AnnotatedSentence`] per line).
pub fn write_jsonl(sentences: &[AnnotatedSentence]) -> Result<String> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Vec<AnnotatedSentence>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: AnnotatedSentence = serde_json::from_str(&line)?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
