//! Clinical free-text analytics: ingestion dataflows, de-identification,
//! search, concept recognition and linking, annotation with active learning,
//! and cohort eligibility.

pub mod annotate;
pub mod api;
pub mod codec;
pub mod cohort;
pub mod deid;
pub mod index;
pub mod ingest;
pub mod nerl;
pub mod text;

pub use deid::{detect_phi, redact, DeidConfig, PhiCategory, PhiSpan};
pub use index::{parse_query, InvertedIndex, QueryAst, SearchHit};
pub use ingest::{DocType, Document};
pub use nerl::{EntityMention, ModelBundle};
pub use text::{tokenize, Token};
