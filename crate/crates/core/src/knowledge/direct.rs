//! Lenient grammar for direct entity answers: one entity per line, either
//! `surface (TYPE)` or `surface: TYPE`. Lines matching neither are skipped
//! and counted.

use serde::{Deserialize, Serialize};

use crate::corpus::TagCategory;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectPrediction {
    pub entities: Vec<(String, TagCategory)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirectParse {
    pub prediction: DirectPrediction,
    pub skipped: usize,
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix(['-', '*', '•']) {
        return rest.trim_start();
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    line
}

fn parse_line(line: &str) -> Option<(String, TagCategory)> {
    let line = strip_list_marker(line);
    let (surface, ty) = if let Some(inner) = line.strip_suffix(')') {
        let open = inner.rfind('(')?;
        (&inner[..open], &inner[open + 1..])
    } else {
        let colon = line.rfind(':')?;
        (&line[..colon], &line[colon + 1..])
    };
    let surface = surface.split_whitespace().collect::<Vec<_>>().join(" ");
    if surface.is_empty() {
        return None;
    }
    Some((surface, TagCategory::parse_ci(ty)?))
}

pub fn parse_direct(answer: &str) -> DirectParse {
    let mut out = DirectParse::default();
    for line in answer.lines().filter(|l| !l.trim().is_empty()) {
        match parse_line(line) {
            Some(e) => out.prediction.entities.push(e),
            None => out.skipped += 1,
        }
    }
    out
}
