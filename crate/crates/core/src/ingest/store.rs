use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Document;
use crate::nerl::EntityMention;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

fn write_atomically(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    let mut out = BufWriter::new(file);
    write(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| StoreError::io(&tmp, e))?;
    drop(out);
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Documents keyed by `doc_id`; writes are upserts (last write wins).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentStore {
    docs: BTreeMap<String, Document>,
}

impl DocumentStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the previous version when `doc_id` already existed.
    pub fn upsert(&mut self, doc: Document) -> Option<Document> {
        self.docs.insert(doc.doc_id.clone(), doc)
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let mut store = Self::new();
        if path.exists() {
            for doc in read_jsonl::<Document>(path)? {
                store.upsert(doc);
            }
        }
        Ok(store)
    }

    /// One JSON document per line, ordered by `doc_id`.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_atomically(path, |out| {
            for doc in self.docs.values() {
                serde_json::to_writer(&mut *out, doc)?;
                out.write_all(b"\n")?;
            }
            Ok(())
        })
    }
}

impl FromIterator<Document> for DocumentStore {
    fn from_iter<I: IntoIterator<Item = Document>>(iter: I) -> Self {
        let mut store = Self::new();
        for doc in iter {
            store.upsert(doc);
        }
        store
    }
}

/// Linked entity mentions per document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationStore {
    mentions: BTreeMap<String, Vec<EntityMention>>,
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the mentions stored for `doc_id`.
    pub fn set(&mut self, doc_id: &str, mentions: Vec<EntityMention>) {
        self.mentions.insert(doc_id.to_string(), mentions);
    }

    pub fn get(&self, doc_id: &str) -> &[EntityMention] {
        self.mentions.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.mentions.values().map(Vec::len).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = MentionRow> + '_ {
        self.mentions
            .iter()
            .flat_map(|(doc_id, ms)| ms.iter().map(move |m| MentionRow::new(doc_id, m)))
    }
}

/// Flat, relational-friendly form of a stored mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRow {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub cui: String,
    pub confidence: f64,
    pub negation: Option<String>,
    pub experiencer: Option<String>,
    pub temporality: Option<String>,
}

impl MentionRow {
    pub fn new(doc_id: &str, m: &EntityMention) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            start: m.start,
            end: m.end,
            cui: m.cui.clone(),
            confidence: m.confidence,
            negation: m.meta.get("negation").cloned(),
            experiencer: m.meta.get("experiencer").cloned(),
            temporality: m.meta.get("temporality").cloned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(format!("unknown export format `{other}`")),
        }
    }
}

const CSV_HEADER: [&str; 8] = [
    "doc_id",
    "start",
    "end",
    "cui",
    "confidence",
    "negation",
    "experiencer",
    "temporality",
];

/// Writes one row per stored mention and returns how many were written.
pub fn export_annotations(store: &AnnotationStore, dest: &Path, format: ExportFormat) -> Result<usize, StoreError> {
    let mut count = 0;
    match format {
        ExportFormat::Csv => {
            let file = File::create(dest).map_err(|e| StoreError::io(dest, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(CSV_HEADER)?;
            for row in store.rows() {
                w.write_record([
                    row.doc_id.as_str(),
                    &row.start.to_string(),
                    &row.end.to_string(),
                    &row.cui,
                    &row.confidence.to_string(),
                    row.negation.as_deref().unwrap_or(""),
                    row.experiencer.as_deref().unwrap_or(""),
                    row.temporality.as_deref().unwrap_or(""),
                ])?;
                count += 1;
            }
            w.flush().map_err(|e| StoreError::io(dest, e))?;
        }
        ExportFormat::Jsonl => {
            let file = File::create(dest).map_err(|e| StoreError::io(dest, e))?;
            let mut out = BufWriter::new(file);
            for row in store.rows() {
                serde_json::to_writer(&mut out, &row).map_err(|e| StoreError::io(dest, e.into()))?;
                out.write_all(b"\n").map_err(|e| StoreError::io(dest, e))?;
                count += 1;
            }
            out.flush().map_err(|e| StoreError::io(dest, e))?;
        }
    }
    Ok(count)
}

/// Reads back a file written by [`export_annotations`].
pub fn import_annotations(src: &Path, format: ExportFormat) -> Result<Vec<MentionRow>, StoreError> {
    match format {
        ExportFormat::Jsonl => read_jsonl(src),
        ExportFormat::Csv => {
            let mut r = csv::Reader::from_path(src)?;
            let mut rows = Vec::new();
            for (i, rec) in r.records().enumerate() {
                let rec = rec?;
                let bad = |reason: String| StoreError::Parse {
                    path: src.display().to_string(),
                    line: i + 2,
                    reason,
                };
                let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
                if rec.len() != CSV_HEADER.len() {
                    return Err(bad(format!("expected {} fields", CSV_HEADER.len())));
                }
                rows.push(MentionRow {
                    doc_id: rec[0].to_string(),
                    start: rec[1].parse().map_err(|e| bad(format!("start: {e}")))?,
                    end: rec[2].parse().map_err(|e| bad(format!("end: {e}")))?,
                    cui: rec[3].to_string(),
                    confidence: rec[4].parse().map_err(|e| bad(format!("confidence: {e}")))?,
                    negation: opt(&rec[5]),
                    experiencer: opt(&rec[6]),
                    temporality: opt(&rec[7]),
                });
            }
            Ok(rows)
        }
    }
}
