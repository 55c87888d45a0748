//! Batch ingestion: extraction of heterogeneous records into [`Document`]s,
//! directed flow graphs of source/transform/sink nodes, and the on-disk
//! document and annotation stores.

mod extract;
mod flow;
mod schedule;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{extract_text, FieldMapping, FieldRef, RawRecord, RecordFormat};
pub use flow::{
    FlowEngine, FlowError, FlowGraph, FlowNode, FlowRunReport, NodeCounts, NodeKind, RecordError,
};
pub use schedule::{Clock, ManualClock, Schedule, SystemClock};
pub use store::{
    export_annotations, import_annotations, AnnotationStore, DocumentStore, ExportFormat,
    MentionRow, StoreError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocType {
    ClinicalNote,
    ImagingReport,
    Letter,
    Other,
}

impl DocType {
    pub fn as_str(self) -> &'static str {
        match self {
            DocType::ClinicalNote => "clinical_note",
            DocType::ImagingReport => "imaging_report",
            DocType::Letter => "letter",
            DocType::Other => "other",
        }
    }
}

impl fmt::Display for DocType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DocType {
    type Err = ExtractError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "clinical_note" => Ok(DocType::ClinicalNote),
            "imaging_report" => Ok(DocType::ImagingReport),
            "letter" => Ok(DocType::Letter),
            "other" => Ok(DocType::Other),
            other => Err(ExtractError::InvalidDocType(other.to_string())),
        }
    }
}

/// One clinical text record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub patient_id: String,
    pub doc_type: DocType,
    pub timestamp: DateTime<Utc>,
    pub source: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("missing mapped field `{0}`")]
    MissingField(String),
    #[error("unparseable timestamp `{0}`")]
    BadTimestamp(String),
    #[error("empty text")]
    EmptyText,
    #[error("unknown doc_type `{0}`")]
    InvalidDocType(String),
    #[error("malformed {format} record: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("extraction of {0} is not supported")]
    NotSupported(String),
}

/// Accepts RFC 3339 instants, naive date-times (taken as UTC) and bare dates
/// (midnight UTC).
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, ExtractError> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(naive.and_utc());
        }
    }
    if let Ok(date) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(date.and_hms_opt(0, 0, 0).unwrap().and_utc());
    }
    Err(ExtractError::BadTimestamp(s.to_string()))
}
