//! Token accuracy and exact-match span precision/recall/F1 over BIO2 tags.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{split_tag, to_bio2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub tokens: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub spans: SpanCounts,
    pub per_label: BTreeMap<String, SpanCounts>,
    pub seconds: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_aligned<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Mismatch(format!("{} predicted vs {} gold sentences", pred.len(), gold.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Mismatch(format!("sentence {}: {} predicted vs {} gold tags", i + 1, p.len(), g.len())));
        }
    }
    Ok(())
}

/// Fraction of positions where the predicted tag equals the gold tag.
pub fn evaluate_accuracy<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<f64> {
    check_aligned(pred, gold)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    let hits = pred
        .iter()
        .zip(gold)
        .flat_map(|(p, g)| p.iter().zip(g))
        .filter(|(a, b)| a.as_ref() == b.as_ref())
        .count();
    Ok(ratio(hits, total))
}

/// `(type, start, end)` spans, end exclusive; tags are repaired to BIO2 first.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<(String, usize, usize)>> {
    let tags = to_bio2(tags)?;
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, t) in tags.iter().enumerate() {
        let (p, ty) = split_tag(t)?;
        if p != 'I' {
            if let Some((ty, s)) = open.take() {
                spans.push((ty, s, i));
            }
            if p == 'B' {
                open = Some((ty.to_string(), i));
            }
        }
    }
    if let Some((ty, s)) = open {
        spans.push((ty, s, tags.len()));
    }
    Ok(spans)
}

/// Micro-averaged span scores: a predicted span is correct iff a gold span
/// has the same type and boundaries.
pub fn evaluate_span_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<EvalReport> {
    check_aligned(pred, gold)?;
    let mut total = SpanCounts::default();
    let mut per_label: BTreeMap<String, SpanCounts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let ps: BTreeSet<_> = extract_spans(p)?.into_iter().collect();
        let gs: BTreeSet<_> = extract_spans(g)?.into_iter().collect();
        for s in &ps {
            let e = per_label.entry(s.0.clone()).or_default();
            if gs.contains(s) {
                e.tp += 1;
                total.tp += 1;
            } else {
                e.fp += 1;
                total.fp += 1;
            }
        }
        for s in gs.difference(&ps) {
            per_label.entry(s.0.clone()).or_default().fn_ += 1;
            total.fn_ += 1;
        }
    }
    Ok(EvalReport {
        sentences: gold.len(),
        tokens: gold.iter().map(Vec::len).sum(),
        accuracy: evaluate_accuracy(pred, gold)?,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        spans: total,
        per_label,
        seconds: 0.0,
    })
}
