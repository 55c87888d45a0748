//! Synthetic inputs shared by the benchmarks.

use chrono::{Duration, TimeZone, Utc};
use medtext::nerl::{build_cdb, train_self_supervised, train_word_embeddings, OntologyRow, Word2VecConfig};
use medtext::{DocType, Document, ModelBundle};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "patient", "reports", "denies", "fever", "chills", "cough", "chest", "pain", "shortness", "of", "breath", "history",
    "heart", "failure", "lung", "cancer", "diabetes", "renal", "acute", "chronic", "today", "and", "with", "no",
    "evidence", "the", "was", "seen", "in", "clinic", "rash", "nausea", "headache", "hypertension", "stable",
];

const PHI: &[&str] = &[
    "Dr Smith", "Mr John Brown", "020 7946 0018", "12/03/2021", "j.brown@nhs.net", "SW1A 1AA", "943 476 5919",
];

/// `words` random clinical words with occasional PHI fragments.
pub fn note(rng: &mut impl Rng, words: usize) -> String {
    let mut out = Vec::with_capacity(words);
    for _ in 0..words {
        if rng.gen_bool(0.03) {
            out.push(*PHI.choose(rng).unwrap());
        } else {
            out.push(*WORDS.choose(rng).unwrap());
        }
    }
    out.join(" ")
}

pub fn corpus(n: usize, words: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types = [DocType::ClinicalNote, DocType::ImagingReport, DocType::Letter, DocType::Other];
    let base = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|i| Document {
            doc_id: format!("doc{i:06}"),
            patient_id: format!("p{}", i % 97),
            doc_type: types[i % types.len()],
            timestamp: base + Duration::minutes(rng.gen_range(0..1_000_000)),
            source: "bench".into(),
            text: note(&mut rng, words),
            metadata: Default::default(),
        })
        .collect()
}

/// A bundle with embeddings and self-supervised concept vectors trained on
/// a small synthetic corpus.
pub fn bundle(seed: u64) -> ModelBundle {
    let docs = corpus(300, 40, seed);
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let config = Word2VecConfig {
        dim: 32,
        epochs: 2,
        seed,
        ..Default::default()
    };
    let vocab = train_word_embeddings(texts.iter().copied(), &config).unwrap();
    let rows = [
        ("C0015967", "fever"),
        ("C0085593", "chills"),
        ("C0010200", "cough"),
        ("C0008031", "chest pain"),
        ("C0018801", "heart failure"),
        ("C0242379", "lung cancer"),
        ("C0011849", "diabetes"),
        ("C0020538", "hypertension"),
        ("C0027497", "nausea"),
        ("C0018681", "headache"),
        ("C0015230", "rash"),
    ];
    let rows: Vec<OntologyRow> = rows.iter().map(|(c, n)| OntologyRow::new(c, n, true)).collect();
    let mut cdb = build_cdb(&rows).unwrap();
    let bundle = ModelBundle::new(cdb.clone(), vocab);
    train_self_supervised(texts.iter().copied(), &mut cdb, &bundle.vocab, &bundle.config.link);
    ModelBundle { cdb, ..bundle }
}
