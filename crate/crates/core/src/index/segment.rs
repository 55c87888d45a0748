//! On-disk segment: `postings.bin`, `stored.bin` and `manifest.bin`.

use std::fs;
use std::path::Path;

use chrono::DateTime;
use thiserror::Error;

use super::{InvertedIndex, Posting, StoredDoc};
use crate::codec::{CodecError, Decoder, Encoder};

pub const POSTINGS_FILE: &str = "postings.bin";
pub const STORED_FILE: &str = "stored.bin";
pub const MANIFEST_FILE: &str = "manifest.bin";

const POSTINGS_MAGIC: [u8; 4] = *b"MTPS";
const STORED_MAGIC: [u8; 4] = *b"MTSF";
const MANIFEST_MAGIC: [u8; 4] = *b"MTIX";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("{file}: {source}")]
    Codec {
        file: &'static str,
        #[source]
        source: CodecError,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("segment inconsistent with manifest: {0}")]
    Mismatch(String),
}

fn codec(file: &'static str) -> impl Fn(CodecError) -> SegmentError {
    move |source| SegmentError::Codec { file, source }
}

impl InvertedIndex {
    pub fn save(&self, dir: &Path) -> Result<(), SegmentError> {
        fs::create_dir_all(dir)?;

        let mut p = Encoder::new(POSTINGS_MAGIC, VERSION);
        p.len(self.postings.len());
        for (term, list) in &self.postings {
            p.str(term).len(list.len());
            for post in list {
                p.str(&post.doc_id).u32(post.tf).len(post.positions.len());
                for &pos in &post.positions {
                    p.u32(pos);
                }
            }
        }
        let postings = p.finish();

        let mut s = Encoder::new(STORED_MAGIC, VERSION);
        s.len(self.docs.len());
        for (id, d) in &self.docs {
            s.str(id)
                .str(&d.patient_id)
                .str(d.doc_type.as_str())
                .i64(d.timestamp.timestamp())
                .u32(d.timestamp.timestamp_subsec_nanos())
                .str(&d.source)
                .u32(d.length)
                .len(d.spans.len());
            for &(a, b) in &d.spans {
                s.u32(a).u32(b);
            }
        }
        let stored = s.finish();

        let mut m = Encoder::new(MANIFEST_MAGIC, VERSION);
        m.u64(self.docs.len() as u64)
            .u64(self.total_length)
            .u32(crc32fast::hash(&postings))
            .u32(crc32fast::hash(&stored));
        let manifest = m.finish();

        // manifest last so a crash mid-write leaves a detectable mismatch
        fs::write(dir.join(POSTINGS_FILE), &postings)?;
        fs::write(dir.join(STORED_FILE), &stored)?;
        fs::write(dir.join(MANIFEST_FILE), &manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SegmentError> {
        let manifest = fs::read(dir.join(MANIFEST_FILE))?;
        let postings_bytes = fs::read(dir.join(POSTINGS_FILE))?;
        let stored_bytes = fs::read(dir.join(STORED_FILE))?;

        let mut m = Decoder::new(&manifest, MANIFEST_MAGIC, VERSION).map_err(codec(MANIFEST_FILE))?;
        let n = m.u64().map_err(codec(MANIFEST_FILE))? as usize;
        let total_length = m.u64().map_err(codec(MANIFEST_FILE))?;
        let postings_crc = m.u32().map_err(codec(MANIFEST_FILE))?;
        let stored_crc = m.u32().map_err(codec(MANIFEST_FILE))?;
        m.finish().map_err(codec(MANIFEST_FILE))?;
        if crc32fast::hash(&postings_bytes) != postings_crc {
            return Err(SegmentError::Mismatch(format!("{POSTINGS_FILE} checksum")));
        }
        if crc32fast::hash(&stored_bytes) != stored_crc {
            return Err(SegmentError::Mismatch(format!("{STORED_FILE} checksum")));
        }

        let mut ix = InvertedIndex::new();
        let e = codec(POSTINGS_FILE);
        let mut p = Decoder::new(&postings_bytes, POSTINGS_MAGIC, VERSION).map_err(&e)?;
        for _ in 0..p.len().map_err(&e)? {
            let term = p.str().map_err(&e)?;
            let count = p.len().map_err(&e)?;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let doc_id = p.str().map_err(&e)?;
                let tf = p.u32().map_err(&e)?;
                let positions = (0..p.len().map_err(&e)?)
                    .map(|_| p.u32())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(&e)?;
                list.push(Posting { doc_id, tf, positions });
            }
            ix.postings.insert(term, list);
        }
        p.finish().map_err(&e)?;

        let e = codec(STORED_FILE);
        let bad = |msg: String| SegmentError::Codec {
            file: STORED_FILE,
            source: CodecError::Invalid(msg),
        };
        let mut s = Decoder::new(&stored_bytes, STORED_MAGIC, VERSION).map_err(&e)?;
        for _ in 0..s.len().map_err(&e)? {
            let id = s.str().map_err(&e)?;
            let patient_id = s.str().map_err(&e)?;
            let doc_type = s.str().map_err(&e)?.parse().map_err(|x| bad(format!("{x}")))?;
            let secs = s.i64().map_err(&e)?;
            let nanos = s.u32().map_err(&e)?;
            let timestamp = DateTime::from_timestamp(secs, nanos).ok_or_else(|| bad("timestamp out of range".into()))?;
            let source = s.str().map_err(&e)?;
            let length = s.u32().map_err(&e)?;
            let spans = (0..s.len().map_err(&e)?)
                .map(|_| Ok((s.u32()?, s.u32()?)))
                .collect::<Result<Vec<_>, CodecError>>()
                .map_err(&e)?;
            ix.docs.insert(
                id,
                StoredDoc {
                    patient_id,
                    doc_type,
                    timestamp,
                    source,
                    length,
                    spans,
                    terms: Vec::new(),
                },
            );
        }
        s.finish().map_err(&e)?;

        for (term, list) in &ix.postings {
            for post in list {
                let doc = ix
                    .docs
                    .get_mut(&post.doc_id)
                    .ok_or_else(|| SegmentError::Mismatch(format!("posting for unknown doc {}", post.doc_id)))?;
                doc.terms.push(term.clone());
            }
        }
        ix.total_length = ix.docs.values().map(|d| u64::from(d.length)).sum();
        if ix.docs.len() != n || ix.total_length != total_length {
            return Err(SegmentError::Mismatch("document count or length".into()));
        }
        Ok(ix)
    }
}
