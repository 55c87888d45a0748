//! Named entity recognition and linking: concept database, word embeddings,
//! longest-match detection, similarity linking, training, meta-annotation,
//! document classification and evaluation.

mod bundle;
mod cdb;
mod doc_classifier;
mod eval;
mod linker;
mod meta;
mod train;
pub mod vector;
mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;

pub use bundle::{BundleConfig, ModelBundle, BUNDLE_MANIFEST};
pub use cdb::{build_cdb, read_ontology, Concept, ConceptDatabase, OntologyRow};
pub use doc_classifier::{train_doc_classifier, DocClassifier, DocClassifierConfig, LabeledDoc};
pub use eval::{evaluate_ner, GoldMention, NerReport, Scores};
pub use linker::{compute_context_vector, detect_candidates, link_entities, Candidate, LinkConfig};
pub use meta::{meta_features, softmax_loss_gradient, train_meta, MetaConfig, MetaExample, MetaModel, MetaPrediction};
pub use train::{train_self_supervised, train_supervised, SkippedExample, SupervisedExample, SupervisedReport};
pub use vocab::{train_word_embeddings, Vocab, Word2VecConfig};

/// A linked concept mention. `end` and `token_end` are exclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub token_start: usize,
    pub token_end: usize,
    /// The matched, normalized name.
    pub name: String,
    pub cui: String,
    pub confidence: f64,
    /// Meta-annotation task → label.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum NerlError {
    #[error("concept {0} has more than one preferred name")]
    DuplicatePreferred(String),
    #[error("concept {0} has no preferred name")]
    MissingPreferred(String),
    #[error("concept {cui} has a name with no tokens: {name:?}")]
    EmptyName { cui: String, name: String },
    #[error("ontology line {line}: {reason}")]
    Ontology { line: usize, reason: String },
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("invalid embedding dimension {0}")]
    InvalidDimension(usize),
    #[error("no known context words around the mention")]
    NoContext,
    #[error("unknown concept {0}")]
    UnknownCui(String),
    #[error("training data needs at least two distinct labels")]
    SingleLabelData,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("span {start}..{end} is outside the token sequence")]
    BadSpan { start: usize, end: usize },
    #[error("invalid model bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
