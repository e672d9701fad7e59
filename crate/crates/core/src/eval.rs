//! Entity-level precision / recall / F1.
//!
//! A predicted span counts only if start, end and category all match a gold
//! span. Precision with no predictions is 0, as is F1 when P + R = 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, TagCategory};
use crate::error::{Error, Result};
use crate::knowledge::DirectPrediction;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Scores {
    pub fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
            gold,
            predicted,
            correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_type: BTreeMap<TagCategory, Scores>,
    pub overall: Scores,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    gold: usize,
    predicted: usize,
    correct: usize,
}

fn report(counts: &BTreeMap<TagCategory, Counts>) -> MetricReport {
    let mut total = Counts::default();
    let per_type = TagCategory::ALL
        .iter()
        .map(|&c| {
            let n = counts.get(&c).copied().unwrap_or_default();
            total.gold += n.gold;
            total.predicted += n.predicted;
            total.correct += n.correct;
            (c, Scores::from_counts(n.gold, n.predicted, n.correct))
        })
        .collect();
    MetricReport {
        per_type,
        overall: Scores::from_counts(total.gold, total.predicted, total.correct),
    }
}

/// Scores per-sentence span lists keyed by sentence id. Both sides must
/// cover the same ids.
pub fn score_spans(
    gold: &BTreeMap<String, Vec<EntitySpan>>,
    pred: &BTreeMap<String, Vec<EntitySpan>>,
) -> Result<MetricReport> {
    if let Some(id) = gold.keys().find(|id| !pred.contains_key(*id)) {
        return Err(Error::UnknownId(format!("{id} has no prediction")));
    }
    if let Some(id) = pred.keys().find(|id| !gold.contains_key(*id)) {
        return Err(Error::UnknownId(format!("{id} has no gold annotation")));
    }
    let mut counts: BTreeMap<TagCategory, Counts> = BTreeMap::new();
    for (id, g) in gold {
        let p = &pred[id];
        let gset: BTreeSet<&EntitySpan> = g.iter().collect();
        for s in g {
            counts.entry(s.category).or_default().gold += 1;
        }
        for s in p.iter().collect::<BTreeSet<_>>() {
            let c = counts.entry(s.category).or_default();
            c.predicted += 1;
            if gset.contains(s) {
                c.correct += 1;
            }
        }
    }
    Ok(report(&counts))
}

fn normalize(s: &str, case_insensitive: bool) -> String {
    let joined = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if case_insensitive {
        joined.to_lowercase()
    } else {
        joined
    }
}

/// Complete-match scoring of direct (surface, type) predictions. Each gold
/// entity absorbs at most one prediction, matched greedily in prediction order.
pub fn score_direct(
    gold: &BTreeMap<String, Vec<(String, TagCategory)>>,
    pred: &BTreeMap<String, DirectPrediction>,
    case_insensitive: bool,
) -> MetricReport {
    let mut counts: BTreeMap<TagCategory, Counts> = BTreeMap::new();
    let ids: BTreeSet<&String> = gold.keys().chain(pred.keys()).collect();
    let empty_gold = Vec::new();
    for id in ids {
        let g = gold.get(id).unwrap_or(&empty_gold);
        let mut open: Vec<Option<(String, TagCategory)>> = g
            .iter()
            .map(|(s, c)| Some((normalize(s, case_insensitive), *c)))
            .collect();
        for (_, c) in g {
            counts.entry(*c).or_default().gold += 1;
        }
        let Some(p) = pred.get(id) else { continue };
        for (surface, cat) in &p.entities {
            let entry = counts.entry(*cat).or_default();
            entry.predicted += 1;
            let key = normalize(surface, case_insensitive);
            if let Some(slot) = open
                .iter_mut()
                .find(|o| matches!(o, Some((s, c)) if *s == key && c == cat))
            {
                *slot = None;
                entry.correct += 1;
            }
        }
    }
    report(&counts)
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Fixed-width table: per-type F1 columns, then overall P / R / F1, in percent.
pub fn render_table(reports: &[(String, MetricReport)]) -> String {
    let name_w = reports
        .iter()
        .map(|(n, _)| n.chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Model");
    for c in TagCategory::ALL {
        let _ = write!(out, " {:>7}", c.as_str());
    }
    let _ = writeln!(out, " {:>7} {:>7} {:>7}", "Pre.", "Rec.", "F1");
    for (name, r) in reports {
        let _ = write!(out, "{name:<name_w$}");
        for c in TagCategory::ALL {
            let _ = write!(out, " {:>7}", pct(r.per_type[&c].f1));
        }
        let _ = writeln!(
            out,
            " {:>7} {:>7} {:>7}",
            pct(r.overall.precision),
            pct(r.overall.recall),
            pct(r.overall.f1)
        );
    }
    out
}

/// Overall-only table (few-shot and direct-prediction layouts).
pub fn render_prf_table(rows: &[(String, Scores)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<name_w$} {:>7} {:>7} {:>7}", "Setting", "Pre.", "Rec.", "F1");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name:<name_w$} {:>7} {:>7} {:>7}",
            pct(s.precision),
            pct(s.recall),
            pct(s.f1)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TagCategory::*;

    fn sp(s: usize, e: usize, c: TagCategory) -> EntitySpan {
        EntitySpan::new(s, e, c)
    }

    fn one(id: &str, spans: Vec<EntitySpan>) -> BTreeMap<String, Vec<EntitySpan>> {
        BTreeMap::from([(id.to_string(), spans)])
    }

    #[test]
    fn four_gold_three_pred_two_correct() {
        let gold = one("s", vec![sp(0, 1, Per), sp(2, 3, Loc), sp(4, 5, Org), sp(6, 8, Other)]);
        let pred = one("s", vec![sp(0, 1, Per), sp(2, 3, Loc), sp(4, 6, Org)]);
        let r = score_spans(&gold, &pred).unwrap();
        assert!((r.overall.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.overall.recall, 0.5);
        assert!((r.overall.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.per_type[&Per].f1, 1.0);
        assert_eq!(r.per_type[&Org].correct, 0);
    }

    #[test]
    fn identity_and_empty_prediction() {
        let gold = one("s", vec![sp(0, 2, Per), sp(3, 4, Loc)]);
        let r = score_spans(&gold, &gold).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.per_type[&Loc].f1, 1.0);

        let r = score_spans(&gold, &one("s", vec![])).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.0, 0.0, 0.0));
        assert!(score_spans(&gold, &one("t", vec![])).is_err());
    }

    #[test]
    fn direct_complete_match() {
        let g = |v: Vec<(&str, TagCategory)>| {
            BTreeMap::from([(
                "s".to_string(),
                v.into_iter().map(|(a, b)| (a.to_string(), b)).collect::<Vec<_>>(),
            )])
        };
        let p = |v: Vec<(&str, TagCategory)>| {
            BTreeMap::from([(
                "s".to_string(),
                DirectPrediction {
                    entities: v.into_iter().map(|(a, b)| (a.to_string(), b)).collect(),
                },
            )])
        };
        let r = score_direct(&g(vec![("Big B", Per)]), &p(vec![("Big B", Per)]), false);
        assert_eq!(r.overall.f1, 1.0);
        let r = score_direct(&g(vec![("Big B", Per)]), &p(vec![("Big", Per)]), false);
        assert_eq!(r.overall.correct, 0);
        let r = score_direct(
            &g(vec![("Maxim", Other), ("Maxim", Other)]),
            &p(vec![("Maxim", Other)]),
            false,
        );
        assert_eq!(r.per_type[&Other].correct, 1);
        assert_eq!(r.per_type[&Other].recall, 0.5);
        let r = score_direct(&g(vec![("Big  B", Per)]), &p(vec![("big b", Per)]), false);
        assert_eq!(r.overall.correct, 0);
        let r = score_direct(&g(vec![("Big  B", Per)]), &p(vec![("big b", Per)]), true);
        assert_eq!(r.overall.correct, 1);
    }

    #[test]
    fn table_rendering() {
        let mut r = score_spans(&one("s", vec![]), &one("s", vec![])).unwrap();
        r.overall.f1 = 0.7933;
        let t = render_table(&[("PGIM".into(), r.clone()), ("Other".into(), r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("PGIM") && lines[1].ends_with("79.33"));
        assert!(lines[2].starts_with("Other"));
        assert_eq!(render_table(&[]).lines().count(), 1);
        assert!(render_table(&[]).contains("OTHER"));
    }

    fn spans_strategy() -> impl Strategy<Value = Vec<EntitySpan>> {
        proptest::collection::vec((0usize..6, 1usize..3, 0usize..4), 0..5).prop_map(|v| {
            v.into_iter()
                .map(|(s, l, c)| EntitySpan::new(s, s + l, TagCategory::ALL[c]))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn counts_match_double_loop(g in spans_strategy(), p in spans_strategy()) {
            let mut g = g; g.sort(); g.dedup();
            let mut p = p; p.sort(); p.dedup();
            let r = score_spans(&one("s", g.clone()), &one("s", p.clone())).unwrap();
            let mut correct = 0;
            for a in &p {
                for b in &g {
                    if a.start == b.start && a.end == b.end && a.category == b.category {
                        correct += 1;
                    }
                }
            }
            prop_assert_eq!(r.overall.correct, correct);
            prop_assert_eq!(r.overall.gold, g.len());
            prop_assert_eq!(r.overall.predicted, p.len());
            for s in r.per_type.values().chain([&r.overall]) {
                prop_assert!(s.correct <= s.gold.min(s.predicted));
                for v in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn monotone_under_extra_predictions(g in spans_strategy(), p in spans_strategy(), extra in (10usize..12, 0usize..4)) {
            let mut g = g; g.sort(); g.dedup();
            let mut p = p; p.sort(); p.dedup();
            let base = score_spans(&one("s", g.clone()), &one("s", p.clone())).unwrap();
            // An incorrect prediction never raises precision.
            let mut wrong = p.clone();
            wrong.push(EntitySpan::new(extra.0, extra.0 + 1, TagCategory::ALL[extra.1]));
            let r = score_spans(&one("s", g.clone()), &one("s", wrong)).unwrap();
            prop_assert!(r.overall.precision <= base.overall.precision);
            // A correct prediction never lowers recall.
            if let Some(missing) = g.iter().find(|s| !p.contains(s)) {
                let mut right = p.clone();
                right.push(*missing);
                let r = score_spans(&one("s", g.clone()), &one("s", right)).unwrap();
                prop_assert!(r.overall.recall >= base.overall.recall);
            }
        }
    }
}
