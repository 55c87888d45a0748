// Shared fixtures for integration tests across the workspace.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use chrono::{TimeZone, Utc};
use medtext::api::ServiceConfig;
use medtext::ingest::DocumentStore;
use medtext::nerl::{build_cdb, train_meta, MetaConfig, MetaExample, OntologyRow, Vocab};
use medtext::{DocType, Document, InvertedIndex, ModelBundle};

pub const LUNG_CANCER: &str = "C0242379";
pub const FEVER: &str = "C0015967";
pub const CHILLS: &str = "C0085593";

const WORDS: &[&str] = &[
    "no", "evidence", "of", "denies", "patient", "has", "with", "shows", "signs", "lung", "cancer", "fever", "chills",
    "today", "reports", "and", "new",
];

/// One-hot embeddings over a small clinical vocabulary.
pub fn toy_vocab() -> Vocab {
    let dim = WORDS.len();
    Vocab::from_vectors(
        WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                (w.to_string(), 10, v)
            })
            .collect(),
    )
    .unwrap()
}

fn negation_examples() -> Vec<MetaExample> {
    let mut out = Vec::new();
    for concept in ["lung cancer", "fever", "chills"] {
        for (prefix, label) in [
            ("no evidence of ", "negated"),
            ("denies ", "negated"),
            ("no ", "negated"),
            ("patient has ", "affirmed"),
            ("shows signs of ", "affirmed"),
            ("reports new ", "affirmed"),
        ] {
            let text = format!("{prefix}{concept} today");
            let start = prefix.chars().count();
            let end = start + concept.chars().count();
            out.push(MetaExample::from_text(&text, start, end, label).unwrap());
        }
    }
    out
}

/// Concepts for lung cancer, fever and chills with a negation model.
pub fn toy_bundle() -> ModelBundle {
    let cdb = build_cdb(&[
        OntologyRow::new(LUNG_CANCER, "lung cancer", true),
        OntologyRow::new(FEVER, "fever", true),
        OntologyRow::new(FEVER, "pyrexia", false),
        OntologyRow::new(CHILLS, "chills", true),
    ])
    .unwrap();
    let mut bundle = ModelBundle::new(cdb, toy_vocab());
    let model = train_meta("negation", &negation_examples(), &bundle.vocab, &MetaConfig::default()).unwrap();
    bundle.set_meta(model);
    bundle
}

pub fn doc(id: &str, patient: &str, doc_type: DocType, day: u32, text: &str) -> Document {
    Document {
        doc_id: id.into(),
        patient_id: patient.into(),
        doc_type,
        timestamp: Utc.with_ymd_and_hms(2021, 3, day, 9, 0, 0).unwrap(),
        source: "fixture".into(),
        text: text.into(),
        metadata: Default::default(),
    }
}

pub fn three_docs() -> Vec<Document> {
    vec![
        doc("d1", "p1", DocType::ClinicalNote, 1, "Patient has fever and chills today."),
        doc("d2", "p1", DocType::Letter, 2, "Fever resolved. No chills. Fever chart attached."),
        doc("d3", "p2", DocType::ImagingReport, 15, "Shows signs of lung cancer."),
    ]
}

/// Writes documents, index and the toy bundle (as `default`) under `root`.
pub fn write_service(root: &Path, docs: &[Document]) -> ServiceConfig {
    let cfg = ServiceConfig::rooted(root);
    fs::create_dir_all(root).unwrap();
    let store: DocumentStore = docs.iter().cloned().collect();
    store.save(&cfg.documents).unwrap();
    let mut index = InvertedIndex::new();
    for d in docs {
        index.index_document(d);
    }
    index.save(&cfg.index).unwrap();
    toy_bundle().save(&cfg.bundles.join("default")).unwrap();
    fs::create_dir_all(&cfg.events).unwrap();
    cfg
}

/// TOML config pointing at `cfg`'s paths.
pub fn config_toml(cfg: &ServiceConfig) -> String {
    toml_line("documents", &cfg.documents)
        + &toml_line("index", &cfg.index)
        + &toml_line("bundles", &cfg.bundles)
        + &toml_line("projects", &cfg.projects)
        + &toml_line("flows", &cfg.flows)
        + &toml_line("events", &cfg.events)
        + &format!("max_body_bytes = {}\n", cfg.max_body_bytes)
}

fn toml_line(key: &str, p: &Path) -> String {
    format!("{key} = {:?}\n", p.display().to_string())
}
