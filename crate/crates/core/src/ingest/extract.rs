use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{parse_timestamp, DocType, Document, ExtractError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    Txt,
    CsvRow,
    JsonlRow,
    /// Scanned or binary documents. Needs an OCR extractor; none is bundled.
    Pdf,
}

/// An unparsed record as read by a source node.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub payload: Vec<u8>,
    pub format: RecordFormat,
    /// `file:line` for row formats, the file path for whole-file formats.
    pub locator: String,
    /// Header of the originating CSV file, when it had one.
    pub columns: Option<Arc<Vec<String>>>,
}

impl RawRecord {
    pub fn new(payload: impl Into<Vec<u8>>, format: RecordFormat, locator: impl Into<String>) -> Self {
        Self {
            payload: payload.into(),
            format,
            locator: locator.into(),
            columns: None,
        }
    }
}

/// Where a document field is read from: a column index (CSV) or a field name
/// (JSON key, CSV header, or txt front-matter key).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldRef {
    Index(usize),
    Name(String),
}

impl From<&str> for FieldRef {
    fn from(s: &str) -> Self {
        FieldRef::Name(s.to_string())
    }
}

impl From<usize> for FieldRef {
    fn from(i: usize) -> Self {
        FieldRef::Index(i)
    }
}

/// Maps source fields onto [`Document`] fields.
///
/// For txt records two pseudo-fields exist: `$body` (text after the optional
/// `---` front matter) and `$stem` (the file name without extension).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    pub doc_id: FieldRef,
    pub patient_id: FieldRef,
    pub doc_type: FieldRef,
    pub timestamp: FieldRef,
    pub text: FieldRef,
    #[serde(default)]
    pub metadata: BTreeMap<String, FieldRef>,
    /// Fallback values keyed by document field name, used when the mapped
    /// source field is absent.
    #[serde(default)]
    pub defaults: BTreeMap<String, String>,
}

impl FieldMapping {
    /// Columns in document order: doc_id, patient_id, doc_type, timestamp, text.
    pub fn positional() -> Self {
        Self {
            doc_id: 0.into(),
            patient_id: 1.into(),
            doc_type: 2.into(),
            timestamp: 3.into(),
            text: 4.into(),
            metadata: BTreeMap::new(),
            defaults: BTreeMap::new(),
        }
    }

    pub fn named(doc_id: &str, patient_id: &str, doc_type: &str, timestamp: &str, text: &str) -> Self {
        Self {
            doc_id: doc_id.into(),
            patient_id: patient_id.into(),
            doc_type: doc_type.into(),
            timestamp: timestamp.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
            defaults: BTreeMap::new(),
        }
    }
}

trait FieldSource {
    fn get(&self, field: &FieldRef) -> Option<String>;
}

struct JsonFields(serde_json::Map<String, Value>);

impl FieldSource for JsonFields {
    fn get(&self, field: &FieldRef) -> Option<String> {
        let FieldRef::Name(name) = field else {
            return None;
        };
        match self.0.get(name)? {
            Value::Null => None,
            Value::String(s) => Some(s.clone()),
            other => Some(other.to_string()),
        }
    }
}

struct CsvFields {
    values: Vec<String>,
    columns: Option<Arc<Vec<String>>>,
}

impl FieldSource for CsvFields {
    fn get(&self, field: &FieldRef) -> Option<String> {
        let idx = match field {
            FieldRef::Index(i) => *i,
            FieldRef::Name(name) => self.columns.as_ref()?.iter().position(|c| c == name)?,
        };
        self.values.get(idx).cloned()
    }
}

struct TxtFields {
    header: BTreeMap<String, String>,
    body: String,
    stem: String,
}

impl FieldSource for TxtFields {
    fn get(&self, field: &FieldRef) -> Option<String> {
        match field {
            FieldRef::Name(n) if n == "$body" => Some(self.body.clone()),
            FieldRef::Name(n) if n == "$stem" => Some(self.stem.clone()),
            FieldRef::Name(n) => self.header.get(n).cloned(),
            FieldRef::Index(_) => None,
        }
    }
}

fn utf8(raw: &RawRecord, format: &'static str) -> Result<String, ExtractError> {
    String::from_utf8(raw.payload.clone()).map_err(|e| ExtractError::Malformed {
        format,
        reason: e.to_string(),
    })
}

fn parse_txt(raw: &RawRecord) -> Result<TxtFields, ExtractError> {
    let content = utf8(raw, "txt")?;
    let stem = Path::new(&raw.locator)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut header = BTreeMap::new();
    let mut body = content.as_str();
    if let Some(rest) = content.strip_prefix("---\n") {
        if let Some(end) = rest.find("\n---\n").map(|i| (i, i + 5)).or_else(|| {
            rest.strip_suffix("\n---").map(|r| (r.len(), rest.len()))
        }) {
            for line in rest[..end.0].lines() {
                if let Some((k, v)) = line.split_once(':') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
            body = &rest[end.1..];
        }
    }
    Ok(TxtFields {
        header,
        body: body.to_string(),
        stem,
    })
}

fn parse_csv_row(raw: &RawRecord) -> Result<CsvFields, ExtractError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(raw.payload.as_slice());
    let record = reader
        .records()
        .next()
        .ok_or_else(|| ExtractError::Malformed {
            format: "csv",
            reason: "empty row".into(),
        })?
        .map_err(|e| ExtractError::Malformed {
            format: "csv",
            reason: e.to_string(),
        })?;
    Ok(CsvFields {
        values: record.iter().map(str::to_string).collect(),
        columns: raw.columns.clone(),
    })
}

fn parse_jsonl_row(raw: &RawRecord) -> Result<JsonFields, ExtractError> {
    match serde_json::from_slice::<Value>(&raw.payload) {
        Ok(Value::Object(map)) => Ok(JsonFields(map)),
        Ok(_) => Err(ExtractError::Malformed {
            format: "jsonl",
            reason: "row is not an object".into(),
        }),
        Err(e) => Err(ExtractError::Malformed {
            format: "jsonl",
            reason: e.to_string(),
        }),
    }
}

/// Projects a raw record onto a [`Document`] through `mapping`.
///
/// The returned document has an empty `source`; the flow that produced the
/// record fills it in.
pub fn extract_text(raw: &RawRecord, mapping: &FieldMapping) -> Result<Document, ExtractError> {
    let fields: Box<dyn FieldSource> = match raw.format {
        RecordFormat::Txt => Box::new(parse_txt(raw)?),
        RecordFormat::CsvRow => Box::new(parse_csv_row(raw)?),
        RecordFormat::JsonlRow => Box::new(parse_jsonl_row(raw)?),
        RecordFormat::Pdf => return Err(ExtractError::NotSupported("pdf/scanned documents".into())),
    };

    let get = |name: &str, field: &FieldRef| -> Result<String, ExtractError> {
        fields
            .get(field)
            .or_else(|| mapping.defaults.get(name).cloned())
            .ok_or_else(|| ExtractError::MissingField(name.to_string()))
    };

    let doc_id = get("doc_id", &mapping.doc_id)?.trim().to_string();
    if doc_id.is_empty() {
        return Err(ExtractError::MissingField("doc_id".into()));
    }
    let patient_id = get("patient_id", &mapping.patient_id)?.trim().to_string();
    let doc_type: DocType = get("doc_type", &mapping.doc_type)?.parse()?;
    let timestamp = parse_timestamp(&get("timestamp", &mapping.timestamp)?)?;
    let text = get("text", &mapping.text)?;
    if text.trim().is_empty() {
        return Err(ExtractError::EmptyText);
    }
    let metadata = mapping
        .metadata
        .iter()
        .filter_map(|(key, field)| fields.get(field).map(|v| (key.clone(), v)))
        .collect();

    Ok(Document {
        doc_id,
        patient_id,
        doc_type,
        timestamp,
        source: String::new(),
        text,
        metadata,
    })
}
