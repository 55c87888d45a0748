use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{InvertedIndex, QueryAst, FILTER_FIELDS};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

pub fn bm25_idf(n: usize, df: usize) -> f64 {
    let (n, df) = (n as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// BM25 contribution of one leaf with frequency `tf` in a document of
/// length `dl`.
pub fn bm25_term(tf: f64, df: usize, dl: f64, avgdl: f64, n: usize) -> f64 {
    if tf <= 0.0 {
        return 0.0;
    }
    let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
    bm25_idf(n, df) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub highlights: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPage {
    pub total: usize,
    pub hits: Vec<SearchHit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DateInterval {
    Day,
    Month,
    Year,
}

impl std::str::FromStr for DateInterval {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "day" => Ok(DateInterval::Day),
            "month" => Ok(DateInterval::Month),
            "year" => Ok(DateInterval::Year),
            other => Err(AggregateError::UnknownInterval(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AggregateBy {
    Terms { field: String },
    DateHistogram { interval: DateInterval },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub key: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown interval `{0}`")]
    UnknownInterval(String),
}

/// A scoring leaf with its per-document frequencies.
struct Leaf<'a> {
    df: usize,
    tf: BTreeMap<&'a str, u32>,
}

fn positive_leaves<'q>(ast: &'q QueryAst, out: &mut Vec<&'q QueryAst>, with_prefix: bool) {
    match ast {
        QueryAst::Term { .. } | QueryAst::Phrase { .. } => out.push(ast),
        QueryAst::Prefix { .. } if with_prefix => out.push(ast),
        QueryAst::And { clauses } | QueryAst::Or { clauses } => {
            for c in clauses {
                positive_leaves(c, out, with_prefix);
            }
        }
        _ => {}
    }
}

impl InvertedIndex {
    /// Start positions of `terms` as a consecutive run in `doc_id`.
    pub fn phrase_starts(&self, terms: &[String], doc_id: &str) -> Vec<u32> {
        let Some(first) = terms.first().and_then(|t| self.posting(t, doc_id)) else {
            return Vec::new();
        };
        let rest: Option<Vec<_>> = terms[1..].iter().map(|t| self.posting(t, doc_id)).collect();
        let Some(rest) = rest else {
            return Vec::new();
        };
        first
            .positions
            .iter()
            .copied()
            .filter(|&p| {
                rest.iter()
                    .enumerate()
                    .all(|(i, post)| post.positions.binary_search(&(p + i as u32 + 1)).is_ok())
            })
            .collect()
    }

    fn phrase_tf(&self, terms: &[String]) -> BTreeMap<&str, u32> {
        let Some(first) = terms.first() else {
            return BTreeMap::new();
        };
        self.postings(first)
            .iter()
            .filter_map(|p| {
                let n = self.phrase_starts(terms, &p.doc_id).len() as u32;
                (n > 0).then_some((p.doc_id.as_str(), n))
            })
            .collect()
    }

    fn eval<'a>(&'a self, ast: &QueryAst) -> BTreeSet<&'a str> {
        match ast {
            QueryAst::Term { term } => self.postings(term).iter().map(|p| p.doc_id.as_str()).collect(),
            QueryAst::Phrase { terms } => self.phrase_tf(terms).into_keys().collect(),
            QueryAst::Prefix { prefix } => self
                .terms_with_prefix(prefix)
                .flat_map(|t| self.postings(t).iter().map(|p| p.doc_id.as_str()))
                .collect(),
            QueryAst::FieldFilter { field, value } => self
                .docs
                .iter()
                .filter(|(_, d)| d.field(field) == Some(value.as_str()))
                .map(|(id, _)| id.as_str())
                .collect(),
            QueryAst::DateRange { field, from, to } => {
                if field != "timestamp" {
                    return BTreeSet::new();
                }
                self.docs
                    .iter()
                    .filter(|(_, d)| from.is_none_or(|f| d.timestamp >= f) && to.is_none_or(|t| d.timestamp <= t))
                    .map(|(id, _)| id.as_str())
                    .collect()
            }
            QueryAst::MatchAll => self.universe(),
            QueryAst::Not { clause } => {
                let inner = self.eval(clause);
                self.doc_ids().filter(|d| !inner.contains(d)).collect()
            }
            QueryAst::Or { clauses } => clauses.iter().flat_map(|c| self.eval(c)).collect(),
            QueryAst::And { clauses } => {
                let mut acc: Option<BTreeSet<&str>> = None;
                for c in clauses.iter().filter(|c| !matches!(c, QueryAst::Not { .. })) {
                    let s = self.eval(c);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => a.intersection(&s).copied().collect(),
                    });
                }
                let mut acc = acc.unwrap_or_else(|| self.universe());
                for c in clauses {
                    if let QueryAst::Not { clause } = c {
                        for d in self.eval(clause) {
                            acc.remove(d);
                        }
                    }
                }
                acc
            }
        }
    }

    /// Matching doc ids in ascending order.
    pub fn matching(&self, ast: &QueryAst) -> Vec<String> {
        self.eval(ast).into_iter().map(str::to_string).collect()
    }

    fn scored(&self, ast: &QueryAst) -> Vec<(&str, f64)> {
        let matched = self.eval(ast);
        let mut leaves = Vec::new();
        positive_leaves(ast, &mut leaves, false);
        let n = self.doc_count();
        let avgdl = self.avg_doc_length();
        let leaves: Vec<Leaf> = leaves
            .into_iter()
            .map(|leaf| match leaf {
                QueryAst::Term { term } => Leaf {
                    df: self.df(term),
                    tf: self.postings(term).iter().map(|p| (p.doc_id.as_str(), p.tf)).collect(),
                },
                QueryAst::Phrase { terms } => {
                    let tf = self.phrase_tf(terms);
                    Leaf { df: tf.len(), tf }
                }
                _ => unreachable!(),
            })
            .collect();
        let mut out: Vec<(&str, f64)> = matched
            .into_iter()
            .map(|d| {
                let dl = f64::from(self.docs[d].length);
                let score = leaves
                    .iter()
                    .map(|l| bm25_term(f64::from(l.tf.get(d).copied().unwrap_or(0)), l.df, dl, avgdl, n))
                    .sum();
                (d, score)
            })
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        out
    }

    fn highlights(&self, ast: &QueryAst, doc_id: &str) -> Vec<(usize, usize)> {
        let Some(stored) = self.docs.get(doc_id) else {
            return Vec::new();
        };
        let span = |p: u32| stored.spans[p as usize];
        let mut leaves = Vec::new();
        positive_leaves(ast, &mut leaves, true);
        let mut out = BTreeSet::new();
        let add_term = |term: &str, out: &mut BTreeSet<(usize, usize)>| {
            if let Some(post) = self.posting(term, doc_id) {
                for &p in &post.positions {
                    let (s, e) = span(p);
                    out.insert((s as usize, e as usize));
                }
            }
        };
        for leaf in leaves {
            match leaf {
                QueryAst::Term { term } => add_term(term, &mut out),
                QueryAst::Prefix { prefix } => {
                    for t in self.terms_with_prefix(prefix) {
                        add_term(t, &mut out);
                    }
                }
                QueryAst::Phrase { terms } => {
                    for p in self.phrase_starts(terms, doc_id) {
                        let last = p + terms.len() as u32 - 1;
                        out.insert((span(p).0 as usize, span(last).1 as usize));
                    }
                }
                _ => {}
            }
        }
        out.into_iter().collect()
    }

    /// Top `top_k` hits by BM25 score, ties by ascending doc id.
    pub fn search(&self, ast: &QueryAst, top_k: usize) -> Vec<SearchHit> {
        self.search_page(ast, 0, top_k).hits
    }

    /// One page of ranked hits plus the total number of matches.
    pub fn search_page(&self, ast: &QueryAst, from: usize, size: usize) -> SearchPage {
        let scored = self.scored(ast);
        let total = scored.len();
        let hits = scored
            .into_iter()
            .skip(from)
            .take(size)
            .map(|(d, score)| SearchHit {
                doc_id: d.to_string(),
                score,
                highlights: self.highlights(ast, d),
            })
            .collect();
        SearchPage { total, hits }
    }

    /// Counts of matching documents per bucket, sorted by key.
    pub fn aggregate(&self, ast: &QueryAst, by: &AggregateBy) -> Result<Vec<Bucket>, AggregateError> {
        if let AggregateBy::Terms { field } = by {
            if !FILTER_FIELDS.contains(&field.as_str()) {
                return Err(AggregateError::UnknownField(field.clone()));
            }
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in self.eval(ast) {
            let stored = &self.docs[d];
            let key = match by {
                AggregateBy::Terms { field } => stored.field(field).unwrap_or_default().to_string(),
                AggregateBy::DateHistogram { interval } => {
                    let fmt = match interval {
                        DateInterval::Day => "%Y-%m-%d",
                        DateInterval::Month => "%Y-%m",
                        DateInterval::Year => "%Y",
                    };
                    stored.timestamp.format(fmt).to_string()
                }
            };
            *counts.entry(key).or_default() += 1;
        }
        Ok(counts.into_iter().map(|(key, count)| Bucket { key, count }).collect())
    }
}
