//! Inverted index over documents with boolean/phrase/field/date queries,
//! BM25 ranking, highlighting and count aggregations.

mod query;
mod search;
mod segment;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use query::{parse_query, QueryAst, QueryError, DATE_FIELDS, FILTER_FIELDS};
pub use search::{
    bm25_idf, bm25_term, AggregateBy, AggregateError, Bucket, DateInterval, SearchHit, SearchPage, BM25_B, BM25_K1,
};
pub use segment::{SegmentError, MANIFEST_FILE, POSTINGS_FILE, STORED_FILE};

use crate::ingest::{DocType, Document};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posting {
    pub doc_id: String,
    pub tf: u32,
    pub positions: Vec<u32>,
}

/// Per-document fields kept alongside the postings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredDoc {
    pub patient_id: String,
    pub doc_type: DocType,
    pub timestamp: DateTime<Utc>,
    pub source: String,
    /// Number of tokens.
    pub length: u32,
    /// Character span of every token, by position.
    pub spans: Vec<(u32, u32)>,
    /// Distinct terms, sorted; used to retract the doc on replacement.
    pub terms: Vec<String>,
}

impl StoredDoc {
    /// Value of a filterable stored field.
    pub fn field(&self, name: &str) -> Option<&str> {
        match name {
            "doc_type" => Some(self.doc_type.as_str()),
            "patient_id" => Some(&self.patient_id),
            "source" => Some(&self.source),
            _ => None,
        }
    }
}

/// Postings are kept sorted by `doc_id`; equality compares the full state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    docs: BTreeMap<String, StoredDoc>,
    total_length: u64,
}

impl InvertedIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a document, replacing any earlier version with the same id.
    pub fn index_document(&mut self, doc: &Document) {
        self.remove_document(&doc.doc_id);
        let tokens = tokenize(&doc.text);
        let mut by_term: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for t in &tokens {
            by_term.entry(t.text.as_str()).or_default().push(t.position as u32);
        }
        for (term, positions) in &by_term {
            let list = self.postings.entry((*term).to_string()).or_default();
            let at = list.partition_point(|p| p.doc_id < doc.doc_id);
            list.insert(
                at,
                Posting {
                    doc_id: doc.doc_id.clone(),
                    tf: positions.len() as u32,
                    positions: positions.clone(),
                },
            );
        }
        self.total_length += tokens.len() as u64;
        self.docs.insert(
            doc.doc_id.clone(),
            StoredDoc {
                patient_id: doc.patient_id.clone(),
                doc_type: doc.doc_type,
                timestamp: doc.timestamp,
                source: doc.source.clone(),
                length: tokens.len() as u32,
                spans: tokens.iter().map(|t| (t.start as u32, t.end as u32)).collect(),
                terms: by_term.keys().map(|t| t.to_string()).collect(),
            },
        );
    }

    /// Removes a document; returns whether it was present.
    pub fn remove_document(&mut self, doc_id: &str) -> bool {
        let Some(old) = self.docs.remove(doc_id) else {
            return false;
        };
        for term in &old.terms {
            if let Some(list) = self.postings.get_mut(term) {
                if let Ok(at) = list.binary_search_by(|p| p.doc_id.as_str().cmp(doc_id)) {
                    list.remove(at);
                }
                if list.is_empty() {
                    self.postings.remove(term);
                }
            }
        }
        self.total_length -= u64::from(old.length);
        true
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &str, doc_id: &str) -> u32 {
        self.posting(term, doc_id).map_or(0, |p| p.tf)
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.docs.get(doc_id).map(|d| d.length)
    }

    pub fn avg_doc_length(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.docs.len() as f64
        }
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn posting(&self, term: &str, doc_id: &str) -> Option<&Posting> {
        let list = self.postings.get(term)?;
        list.binary_search_by(|p| p.doc_id.as_str().cmp(doc_id))
            .ok()
            .map(|i| &list[i])
    }

    pub fn stored(&self, doc_id: &str) -> Option<&StoredDoc> {
        self.docs.get(doc_id)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.keys().map(String::as_str)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// Terms starting with `prefix`, in order.
    pub fn terms_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.postings
            .range::<str, _>((std::ops::Bound::Included(prefix), std::ops::Bound::Unbounded))
            .map(|(t, _)| t.as_str())
            .take_while(move |t| t.starts_with(prefix))
    }

    fn universe(&self) -> BTreeSet<&str> {
        self.doc_ids().collect()
    }
}
