use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// A mention identified by document, character span and concept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldMention {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub cui: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerReport {
    pub per_cui: BTreeMap<String, Scores>,
    /// Unweighted mean F1 over the concepts present in gold; 0 when gold is
    /// empty.
    pub macro_f1: f64,
}

/// Exact-match scoring on `(doc_id, start, end, cui)`. Duplicates count once.
pub fn evaluate_ner(gold: &[GoldMention], predicted: &[GoldMention]) -> NerReport {
    let gold: BTreeSet<&GoldMention> = gold.iter().collect();
    let pred: BTreeSet<&GoldMention> = predicted.iter().collect();
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for p in &pred {
        let c = counts.entry(&p.cui).or_default();
        if gold.contains(p) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for g in gold.iter().filter(|g| !pred.contains(*g)) {
        counts.entry(&g.cui).or_default().2 += 1;
    }
    let per_cui: BTreeMap<String, Scores> = counts
        .into_iter()
        .map(|(cui, (tp, fp, fn_))| (cui.to_string(), Scores::from_counts(tp, fp, fn_)))
        .collect();
    let gold_cuis: BTreeSet<&str> = gold.iter().map(|g| g.cui.as_str()).collect();
    let macro_f1 = if gold_cuis.is_empty() {
        0.0
    } else {
        gold_cuis.iter().map(|c| per_cui[*c].f1).sum::<f64>() / gold_cuis.len() as f64
    };
    NerReport { per_cui, macro_f1 }
}
