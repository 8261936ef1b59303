//! Span extraction and per-domain span-level F1.
//!
//! Every (utterance, slot type) query is scored on its own; predictions for
//! different slot types of the same utterance are never merged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::corpus::{labels_for, Label, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpanPrediction {
    pub slot_type: String,
    pub start: usize,
    pub end: usize,
}

/// Reads spans from BIO labels. B opens a span, I extends it, and an I with
/// no open span starts a new one.
pub fn extract_spans(labels: &[Label], slot_type: &str) -> Vec<SpanPrediction> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    let close = |open: &mut Option<usize>, end: usize, spans: &mut Vec<SpanPrediction>| {
        if let Some(start) = open.take() {
            spans.push(SpanPrediction {
                slot_type: slot_type.to_string(),
                start,
                end,
            });
        }
    };
    for (i, &label) in labels.iter().enumerate() {
        match label {
            Label::O => close(&mut open, i, &mut spans),
            Label::B => {
                close(&mut open, i, &mut spans);
                open = Some(i);
            }
            Label::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
        }
    }
    close(&mut open, labels.len(), &mut spans);
    spans
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn scores(&self) -> Scores {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact (type, start, end) matching; each gold span matches at most once.
pub fn span_counts(gold: &[SpanPrediction], predicted: &[SpanPrediction]) -> Counts {
    let mut unmatched: Vec<&SpanPrediction> = gold.iter().collect();
    let mut tp = 0;
    for p in predicted {
        if let Some(pos) = unmatched.iter().position(|g| *g == p) {
            unmatched.swap_remove(pos);
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: predicted.len() - tp,
        fn_: gold.len() - tp,
    }
}

pub fn span_f1(gold: &[SpanPrediction], predicted: &[SpanPrediction]) -> (Scores, Counts) {
    let counts = span_counts(gold, predicted);
    (counts.scores(), counts)
}

/// Anything that labels a (slot type, utterance) query.
pub trait SlotTagger {
    fn predict(&self, slot_type: &str, words: &[String]) -> Result<Vec<Label>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainReport {
    pub domain: String,
    pub counts: Counts,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub domains: Vec<DomainReport>,
}

impl F1Report {
    /// Unweighted mean of the domain F1 scores.
    pub fn average_f1(&self) -> f64 {
        if self.domains.is_empty() {
            return 0.0;
        }
        self.domains.iter().map(|d| d.scores.f1).sum::<f64>() / self.domains.len() as f64
    }

    fn average(&self) -> Scores {
        let n = self.domains.len().max(1) as f64;
        Scores {
            precision: self.domains.iter().map(|d| d.scores.precision).sum::<f64>() / n,
            recall: self.domains.iter().map(|d| d.scores.recall).sum::<f64>() / n,
            f1: self.average_f1(),
        }
    }

    fn total_counts(&self) -> Counts {
        let mut total = Counts::default();
        for d in &self.domains {
            total.add(d.counts);
        }
        total
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,precision,recall,f1,tp,fp,fn\n");
        let mut row = |name: &str, s: Scores, c: Counts| {
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{},{},{}",
                s.precision, s.recall, s.f1, c.tp, c.fp, c.fn_
            );
        };
        for d in &self.domains {
            row(&d.domain, d.scores, d.counts);
        }
        row("AVERAGE", self.average(), self.total_counts());
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .domains
            .iter()
            .map(|d| d.domain.len())
            .chain(["AVERAGE".len(), "domain".len()])
            .max()
            .unwrap_or(7);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>6}  {:>6}  {:>6}\n",
            "domain", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        let mut row = |name: &str, s: Scores, c: Counts| {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>6}  {:>6}  {:>6}",
                s.precision, s.recall, s.f1, c.tp, c.fp, c.fn_
            );
        };
        for d in &self.domains {
            row(&d.domain, d.scores, d.counts);
        }
        row("AVERAGE", self.average(), self.total_counts());
        out
    }
}

/// Queries every utterance with each slot type of its domain and pools the
/// confusion counts per domain.
pub fn evaluate<'a>(
    tagger: &impl SlotTagger,
    utterances: impl IntoIterator<Item = &'a Utterance>,
    domain_slot_types: &BTreeMap<String, BTreeSet<String>>,
) -> Result<F1Report> {
    let mut per_domain: BTreeMap<String, Counts> = BTreeMap::new();
    for u in utterances {
        let types = domain_slot_types.get(&u.domain).ok_or_else(|| {
            Error::Data(format!(
                "domain {:?} has no slot-type entry; known domains: {}",
                u.domain,
                domain_slot_types.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        let counts = per_domain.entry(u.domain.clone()).or_default();
        for slot_type in types {
            let gold = extract_spans(&labels_for(u, slot_type), slot_type);
            let labels = tagger.predict(slot_type, &u.words)?;
            if labels.len() != u.words.len() {
                return Err(Error::Shape(format!(
                    "tagger returned {} labels for {} words",
                    labels.len(),
                    u.words.len()
                )));
            }
            counts.add(span_counts(&gold, &extract_spans(&labels, slot_type)));
        }
    }
    Ok(F1Report {
        domains: per_domain
            .into_iter()
            .map(|(domain, counts)| DomainReport {
                domain,
                scores: counts.scores(),
                counts,
            })
            .collect(),
    })
}
