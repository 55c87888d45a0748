// Independent reference implementations and corpus generators used by the
// property tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use chrono::{DateTime, Duration, TimeZone, Utc};
use medtext::cohort::{ClinicalEvent, EligibilityRule, ExclusionLookback};
use medtext::deid::PhiCategory;
use medtext::index::{bm25_idf, BM25_B, BM25_K1};
use medtext::nerl::OntologyRow;
use medtext::{DocType, Document, QueryAst};
use rand::seq::SliceRandom;
use rand::Rng;

// ---------------------------------------------------------------- search

pub const SEARCH_VOCAB: [&str; 24] = [
    "fever", "chills", "cough", "pain", "chest", "heart", "failure", "cardiac", "cardiology", "lung", "cancer", "patient",
    "denies", "reports", "history", "acute", "chronic", "renal", "rash", "nausea", "headache", "a", "the", "of",
];

const DOC_TYPES: [DocType; 4] = [DocType::ClinicalNote, DocType::ImagingReport, DocType::Letter, DocType::Other];

fn zipf_word<R: Rng>(rng: &mut R) -> &'static str {
    // weight 1/(i+1)
    let total: f64 = (1..=SEARCH_VOCAB.len()).map(|i| 1.0 / i as f64).sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in SEARCH_VOCAB.iter().enumerate() {
        x -= 1.0 / (i + 1) as f64;
        if x <= 0.0 {
            return w;
        }
    }
    SEARCH_VOCAB[SEARCH_VOCAB.len() - 1]
}

pub fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
}

pub fn random_corpus<R: Rng>(rng: &mut R, n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=40);
            let mut text = String::new();
            for j in 0..len {
                if j > 0 {
                    text.push_str([" ", " ", " ", ", ", ". ", " - "][rng.gen_range(0..6)]);
                }
                let w = zipf_word(rng);
                if rng.gen_bool(0.1) {
                    text.push_str(&w.to_uppercase());
                } else {
                    text.push_str(w);
                }
            }
            Document {
                doc_id: format!("doc{i:04}"),
                patient_id: format!("p{}", rng.gen_range(0..10)),
                doc_type: DOC_TYPES[rng.gen_range(0..4)],
                timestamp: base_time() + Duration::minutes(rng.gen_range(0..3 * 365 * 24 * 60)),
                source: format!("s{}", rng.gen_range(0..3)),
                text,
                metadata: Default::default(),
            }
        })
        .collect()
}

fn random_leaf<R: Rng>(rng: &mut R) -> QueryAst {
    match rng.gen_range(0..10) {
        0..=3 => QueryAst::term(if rng.gen_bool(0.05) { "absentword" } else { zipf_word(rng) }),
        4 | 5 => {
            let n = rng.gen_range(2..=3);
            let words: Vec<&str> = (0..n).map(|_| zipf_word(rng)).collect();
            QueryAst::phrase(&words)
        }
        6 => {
            let w = zipf_word(rng);
            let cut = rng.gen_range(1..=w.len());
            QueryAst::prefix(&w[..cut])
        }
        7 => match rng.gen_range(0..3) {
            0 => QueryAst::field("doc_type", DOC_TYPES[rng.gen_range(0..4)].as_str()),
            1 => QueryAst::field("patient_id", &format!("p{}", rng.gen_range(0..10))),
            _ => QueryAst::field("source", &format!("s{}", rng.gen_range(0..3))),
        },
        8 => {
            let a = base_time() + Duration::days(rng.gen_range(0..3 * 365));
            let b = a + Duration::days(rng.gen_range(0..400));
            let from = rng.gen_bool(0.8).then_some(a);
            let to = rng.gen_bool(0.8).then_some(b);
            QueryAst::DateRange {
                field: "timestamp".into(),
                from,
                to,
            }
        }
        _ => QueryAst::term(zipf_word(rng)),
    }
}

fn random_node<R: Rng>(rng: &mut R, depth: usize) -> QueryAst {
    if depth == 0 || rng.gen_bool(0.35) {
        return random_leaf(rng);
    }
    let n = rng.gen_range(2..=3);
    if rng.gen_bool(0.5) {
        let clauses = (0..n)
            .map(|_| {
                let c = random_node(rng, depth - 1);
                if rng.gen_bool(0.25) {
                    QueryAst::not(c)
                } else {
                    c
                }
            })
            .collect();
        QueryAst::and(clauses)
    } else {
        QueryAst::or((0..n).map(|_| random_node(rng, depth - 1)).collect())
    }
}

/// A random query accepted by the parser (no pure negations).
pub fn random_query<R: Rng>(rng: &mut R) -> QueryAst {
    let q = random_node(rng, 3);
    if q.is_positive() {
        q
    } else {
        QueryAst::and(vec![random_leaf(rng), q])
    }
}

fn oracle_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

fn occurrences(words: &[String], leaf: &QueryAst) -> usize {
    match leaf {
        QueryAst::Term { term } => words.iter().filter(|w| *w == term).count(),
        QueryAst::Phrase { terms } => {
            if terms.is_empty() || words.len() < terms.len() {
                0
            } else {
                words.windows(terms.len()).filter(|w| w == &terms.as_slice()).count()
            }
        }
        _ => 0,
    }
}

fn field_value(doc: &Document, field: &str) -> Option<String> {
    match field {
        "doc_type" => Some(doc.doc_type.as_str().to_string()),
        "patient_id" => Some(doc.patient_id.clone()),
        "source" => Some(doc.source.clone()),
        _ => None,
    }
}

fn oracle_matches(doc: &Document, words: &[String], ast: &QueryAst) -> bool {
    match ast {
        QueryAst::Term { .. } | QueryAst::Phrase { .. } => occurrences(words, ast) > 0,
        QueryAst::Prefix { prefix } => words.iter().any(|w| w.starts_with(prefix.as_str())),
        QueryAst::FieldFilter { field, value } => field_value(doc, field).as_deref() == Some(value.as_str()),
        QueryAst::DateRange { field, from, to } => {
            field == "timestamp"
                && from.is_none_or(|f| doc.timestamp >= f)
                && to.is_none_or(|t| doc.timestamp <= t)
        }
        QueryAst::MatchAll => true,
        QueryAst::Not { clause } => !oracle_matches(doc, words, clause),
        QueryAst::And { clauses } => clauses.iter().all(|c| oracle_matches(doc, words, c)),
        QueryAst::Or { clauses } => clauses.iter().any(|c| oracle_matches(doc, words, c)),
    }
}

fn scoring_leaves<'a>(ast: &'a QueryAst, out: &mut Vec<&'a QueryAst>) {
    match ast {
        QueryAst::Term { .. } | QueryAst::Phrase { .. } => out.push(ast),
        QueryAst::And { clauses } | QueryAst::Or { clauses } => clauses.iter().for_each(|c| scoring_leaves(c, out)),
        _ => {}
    }
}

fn oracle_bm25(tf: usize, df: usize, dl: usize, avgdl: f64, n: usize) -> f64 {
    if tf == 0 {
        return 0.0;
    }
    let tf = tf as f64;
    let norm = if avgdl > 0.0 { dl as f64 / avgdl } else { 0.0 };
    bm25_idf(n, df) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
}

/// Scores every document directly: boolean match, then BM25 summed over the
/// positive term and phrase leaves. Sorted by score, ties by doc id.
pub fn brute_force_search(docs: &[Document], ast: &QueryAst) -> Vec<(String, f64)> {
    let words: Vec<Vec<String>> = docs.iter().map(|d| oracle_words(&d.text)).collect();
    let n = docs.len();
    let total: usize = words.iter().map(Vec::len).sum();
    let avgdl = if n == 0 { 0.0 } else { total as f64 / n as f64 };
    let mut leaves = Vec::new();
    scoring_leaves(ast, &mut leaves);
    let dfs: Vec<usize> = leaves
        .iter()
        .map(|l| words.iter().filter(|w| occurrences(w, l) > 0).count())
        .collect();
    let mut out: Vec<(String, f64)> = docs
        .iter()
        .zip(&words)
        .filter(|(d, w)| oracle_matches(d, w, ast))
        .map(|(d, w)| {
            let score = leaves
                .iter()
                .zip(&dfs)
                .map(|(l, &df)| oracle_bm25(occurrences(w, l), df, w.len(), avgdl, n))
                .sum();
            (d.doc_id.clone(), score)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

// ---------------------------------------------------------- query grammar

/// Valid queries and their canonical printed form.
pub const VALID_QUERIES: &[(&str, &str)] = &[
    ("fever", "fever"),
    ("Fever", "fever"),
    ("fever chills", "fever AND chills"),
    ("fever AND chills", "fever AND chills"),
    ("fever OR chills", "fever OR chills"),
    ("a OR b OR c", "a OR b OR c"),
    ("a AND b AND c", "a AND b AND c"),
    ("a b OR c", "(a AND b) OR c"),
    ("a OR b c", "a OR (b AND c)"),
    ("a AND (b OR c)", "a AND (b OR c)"),
    ("(fever)", "fever"),
    ("((a OR b))", "a OR b"),
    ("fever AND NOT chills", "fever AND NOT chills"),
    ("fever NOT chills", "fever AND NOT chills"),
    ("NOT chills AND fever", "NOT chills AND fever"),
    ("a AND NOT (b OR c)", "a AND NOT (b OR c)"),
    ("x AND NOT NOT y", "x AND NOT NOT y"),
    ("cough AND (fever OR NOT chills)", "cough AND (fever OR NOT chills)"),
    ("\"heart failure\"", "\"heart failure\""),
    ("\"Heart  Failure\"", "\"heart failure\""),
    ("heart-failure", "\"heart failure\""),
    ("cardi*", "cardi*"),
    ("*", "*"),
    ("doc_type:letter", "doc_type:letter"),
    ("source:s1 AND fever", "source:s1 AND fever"),
    (
        "timestamp:[2020-01-01 TO 2020-12-31]",
        "timestamp:[2020-01-01T00:00:00Z TO 2020-12-31T23:59:59.999999999Z]",
    ),
    ("timestamp:[* TO 2020-01-01T10:00:00Z]", "timestamp:[* TO 2020-01-01T10:00:00Z]"),
    ("timestamp:[2021-06-01T08:30:00Z TO *]", "timestamp:[2021-06-01T08:30:00Z TO *]"),
    (
        "\"lung cancer\" AND doc_type:imaging_report AND NOT smoker",
        "\"lung cancer\" AND doc_type:imaging_report AND NOT smoker",
    ),
];

/// Invalid queries and the character offset the error must report.
pub const INVALID_QUERIES: &[(&str, usize)] = &[
    ("", 0),
    ("   ", 0),
    ("fever AND (", 10),
    ("(a OR b", 0),
    ("a AND (b OR c", 6),
    ("\"heart failure", 0),
    ("fever AND", 6),
    ("fever OR", 6),
    ("OR fever", 0),
    ("fever)", 5),
    ("()", 1),
    ("a ]", 2),
    ("\"\"", 0),
    ("NOT fever", 0),
    ("fever OR NOT chills", 9),
    ("NOT a AND NOT b", 0),
    ("a AND NOT b OR NOT c", 6),
    ("colour:red", 0),
    ("doc_type:[a TO b]", 0),
    ("timestamp:[2020 TO]", 10),
];

// ------------------------------------------------------------------ NER

const SYLLABLES: [&str; 16] = [
    "car", "dio", "neu", "ro", "pat", "hy", "lo", "ma", "ren", "al", "gas", "tri", "tis", "os", "teo", "pul",
];

pub const FILLERS: [&str; 8] = ["the", "patient", "was", "seen", "and", "with", "noted", "today"];

fn random_word<R: Rng>(rng: &mut R) -> String {
    (0..rng.gen_range(2..=3)).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

/// A random ontology: `n` concepts with one to three names of one to three
/// words. Some names are shared between concepts.
pub fn random_ontology<R: Rng>(rng: &mut R, n: usize) -> Vec<OntologyRow> {
    let mut rows = Vec::new();
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut all_names: Vec<String> = Vec::new();
    for i in 0..n {
        let cui = format!("C{i:05}");
        let count = rng.gen_range(1..=3);
        for j in 0..count {
            let name = if j > 0 && !all_names.is_empty() && rng.gen_bool(0.1) {
                all_names.choose(rng).unwrap().clone()
            } else {
                loop {
                    let words: Vec<String> = (0..rng.gen_range(1..=3)).map(|_| random_word(rng)).collect();
                    let name = words.join(" ");
                    if used.insert(name.clone()) {
                        break name;
                    }
                }
            };
            if rows.iter().any(|r: &OntologyRow| r.cui == cui && r.name == name) {
                continue;
            }
            all_names.push(name.clone());
            rows.push(OntologyRow::new(&cui, &name, j == 0));
        }
    }
    rows
}

pub struct Injection {
    pub start: usize,
    pub end: usize,
    pub cui: String,
    pub name: String,
}

/// Concatenates randomly chosen names separated by filler words.
/// Writes each of `rows` once, in order, between random filler words.
pub fn inject_names<R: Rng>(rng: &mut R, rows: &[&OntologyRow]) -> (String, Vec<Injection>) {
    let mut text = String::new();
    let mut out = Vec::new();
    let push = |text: &mut String, s: &str| {
        text.push_str(s);
        text.chars().count()
    };
    for (i, row) in rows.iter().enumerate() {
        let fill: Vec<&str> = (0..rng.gen_range(1..=3)).map(|_| *FILLERS.choose(rng).unwrap()).collect();
        if i > 0 || rng.gen_bool(0.5) {
            push(&mut text, &(fill.join(" ") + " "));
        }
        // vary surface case
        let surface = if rng.gen_bool(0.3) { row.name.to_uppercase() } else { row.name.clone() };
        let start = text.chars().count();
        let end = push(&mut text, &surface);
        push(&mut text, [" ", ", ", ". "][rng.gen_range(0..3)]);
        out.push(Injection {
            start,
            end,
            cui: row.cui.clone(),
            name: row.name.clone(),
        });
    }
    push(&mut text, "today");
    (text, out)
}

// ----------------------------------------------------- disambiguation

pub const SENSE_DISEASE: &str = "C0009443";
pub const SENSE_TEMPERATURE: &str = "C0009264";

const DISEASE_CONTEXT: [&str; 10] = [
    "sneezing", "runny", "nose", "sore", "throat", "congestion", "viral", "rhinorrhea", "coughing", "catarrh",
];
const TEMPERATURE_CONTEXT: [&str; 10] = [
    "freezing", "weather", "outdoors", "snow", "winter", "ice", "wind", "frost", "blizzard", "chilly",
];
const NEUTRAL: [&str; 5] = ["patient", "was", "with", "and", "reports"];

pub fn sense_ontology() -> Vec<OntologyRow> {
    vec![
        OntologyRow::new(SENSE_DISEASE, "common cold", true),
        OntologyRow::new(SENSE_DISEASE, "coryza", false),
        OntologyRow::new(SENSE_DISEASE, "cold", false),
        OntologyRow::new(SENSE_TEMPERATURE, "cold exposure", true),
        OntologyRow::new(SENSE_TEMPERATURE, "hypothermia", false),
        OntologyRow::new(SENSE_TEMPERATURE, "cold", false),
    ]
}

fn context_words<R: Rng>(rng: &mut R, sense: &str, n: usize) -> Vec<&'static str> {
    let pool = if sense == SENSE_DISEASE { &DISEASE_CONTEXT } else { &TEMPERATURE_CONTEXT };
    (0..n)
        .map(|_| if rng.gen_bool(0.2) { *NEUTRAL.choose(rng).unwrap() } else { *pool.choose(rng).unwrap() })
        .collect()
}

/// Sentence with `mention` surrounded by context of one sense.
pub fn sense_sentence<R: Rng>(rng: &mut R, sense: &str, mention: &str) -> (String, usize, usize) {
    let (nl, nr) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    let left = context_words(rng, sense, nl).join(" ");
    let right = context_words(rng, sense, nr).join(" ");
    let start = left.chars().count() + 1;
    let end = start + mention.chars().count();
    (format!("{left} {mention} {right}"), start, end)
}

/// Training documents using only unambiguous names, plus ambiguous ones for
/// embedding training.
pub fn sense_corpus<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    let disease = ["common cold", "coryza"];
    let temperature = ["cold exposure", "hypothermia"];
    (0..n)
        .map(|i| {
            let sense = if i % 2 == 0 { SENSE_DISEASE } else { SENSE_TEMPERATURE };
            let names = if sense == SENSE_DISEASE { &disease } else { &temperature };
            let mention = if rng.gen_bool(0.2) { "cold" } else { names.choose(rng).unwrap() };
            sense_sentence(rng, sense, mention).0
        })
        .collect()
}

// ------------------------------------------------------- meta templates

const META_CONCEPTS: [&str; 12] = [
    "pneumonia",
    "chest pain",
    "diabetes",
    "asthma",
    "heart failure",
    "stroke",
    "migraine",
    "anaemia",
    "sepsis",
    "lung cancer",
    "hypertension",
    "epilepsy",
];

const META_FILLER: [&str; 6] = ["on", "review", "in", "clinic", "this", "admission"];

type Templates = &'static [(&'static str, &'static str, &'static str)];

/// (prefix, suffix, label) templates per task.
pub fn meta_templates(task: &str) -> Templates {
    match task {
        "negation" => &[
            ("no evidence of", "", "negated"),
            ("denies", "", "negated"),
            ("negative for", "", "negated"),
            ("patient does not have", "", "negated"),
            ("without any", "", "negated"),
            ("", "was ruled out", "negated"),
            ("presents today with", "", "affirmed"),
            ("complains of", "", "affirmed"),
            ("patient has", "", "affirmed"),
            ("known", "", "affirmed"),
            ("diagnosed with", "", "affirmed"),
            ("", "is confirmed", "affirmed"),
        ],
        "experiencer" => &[
            ("mother had", "", "other"),
            ("family history of", "", "other"),
            ("father died of", "", "other"),
            ("his sister was diagnosed with", "", "other"),
            ("", "runs in the family", "other"),
            ("patient has", "", "patient"),
            ("he reports", "", "patient"),
            ("she developed", "", "patient"),
            ("admitted today with", "", "patient"),
            ("", "treated on the ward", "patient"),
        ],
        "temporality" => &[
            ("history of", "years ago", "historical"),
            ("previous", "in childhood", "historical"),
            ("past", "long resolved", "historical"),
            ("", "diagnosed in 1998", "historical"),
            ("currently has", "", "current"),
            ("acute", "since yesterday", "current"),
            ("new onset", "this morning", "current"),
            ("ongoing", "today", "current"),
        ],
        other => panic!("no templates for {other}"),
    }
}

pub struct MetaCase {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

pub fn meta_cases<R: Rng>(rng: &mut R, task: &str, n: usize) -> Vec<MetaCase> {
    let templates = meta_templates(task);
    (0..n)
        .map(|_| {
            let (pre, post, label) = *templates.choose(rng).unwrap();
            let concept = *META_CONCEPTS.choose(rng).unwrap();
            let mut left: Vec<&str> = (0..rng.gen_range(0..=2)).map(|_| *META_FILLER.choose(rng).unwrap()).collect();
            if !pre.is_empty() {
                left.push(pre);
            }
            let left = left.join(" ");
            let start = if left.is_empty() { 0 } else { left.chars().count() + 1 };
            let end = start + concept.chars().count();
            let mut text = if left.is_empty() { concept.to_string() } else { format!("{left} {concept}") };
            if !post.is_empty() {
                text.push(' ');
                text.push_str(post);
            }
            for _ in 0..rng.gen_range(0..=2) {
                text.push(' ');
                text.push_str(META_FILLER.choose(rng).unwrap());
            }
            MetaCase {
                text,
                start,
                end,
                label: label.to_string(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------- de-id

const FIRST: [&str; 8] = ["Alice", "David", "Amelia", "Benjamin", "Charlotte", "Daniel", "Anna", "Ali"];
const LAST: [&str; 8] = ["Brown", "Adams", "Baker", "Carter", "Clarke", "Collins", "Cooper", "Anderson"];
const MONTHS: [&str; 8] = ["January", "Feb", "March", "Apr", "July", "Sept", "October", "Dec"];
const TITLES: [&str; 5] = ["Dr", "Mr", "Mrs", "Ms", "Prof"];

pub struct PhiCase {
    pub text: String,
    pub gold: Vec<(usize, usize, PhiCategory)>,
}

fn phi_value<R: Rng>(rng: &mut R, cat: PhiCategory) -> String {
    let d = |rng: &mut R, n: usize| -> String { (0..n).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect() };
    match cat {
        PhiCategory::Name => match rng.gen_range(0..3) {
            0 => format!("{} {}", FIRST.choose(rng).unwrap(), LAST.choose(rng).unwrap()),
            1 => LAST.choose(rng).unwrap().to_string(),
            _ => FIRST.choose(rng).unwrap().to_string(),
        },
        PhiCategory::Date => {
            let day = rng.gen_range(1..=28);
            let month = rng.gen_range(1..=12);
            let year = rng.gen_range(1990..=2023);
            let mname = MONTHS.choose(rng).unwrap();
            match rng.gen_range(0..5) {
                0 => format!("{day:02}/{month:02}/{year}"),
                1 => format!("{year}-{month:02}-{day:02}"),
                2 => format!("{day} {mname} {year}"),
                3 => format!("{mname} {day}, {year}"),
                _ => format!("{day}.{month}.{:02}", year % 100),
            }
        }
        PhiCategory::Phone => match rng.gen_range(0..3) {
            0 => format!("020 {} {}", d(rng, 4), d(rng, 4)),
            1 => format!("07{} {}", d(rng, 3), d(rng, 6)),
            _ => format!("+44 20 {} {}", d(rng, 4), d(rng, 4)),
        },
        PhiCategory::Email => format!(
            "{}.{}@nhs.net",
            FIRST.choose(rng).unwrap().to_lowercase(),
            LAST.choose(rng).unwrap().to_lowercase()
        ),
        PhiCategory::Id => {
            if rng.gen_bool(0.5) {
                let lead = rng.gen_range(1..10);
                format!("{lead}{} {} {}", d(rng, 2), d(rng, 3), d(rng, 4))
            } else {
                let (lead, n) = (rng.gen_range(1..10), rng.gen_range(6..=9));
                format!("{lead}{}", d(rng, n))
            }
        }
        PhiCategory::Postcode => {
            let l = |rng: &mut R| char::from(b'A' + rng.gen_range(0..26u8));
            format!("{}{}{} {}{}{}", l(rng), l(rng), rng.gen_range(1..10), rng.gen_range(0..10), l(rng), l(rng))
        }
        PhiCategory::AgeOver89 => rng.gen_range(90..=105).to_string(),
    }
}

/// (template with `{}` slots, slot categories). Slot text after an age is
/// part of the template.
const PHI_TEMPLATES: &[(&str, &[PhiCategory])] = &[
    ("seen by {} in clinic on {} for review of asthma.", &[PhiCategory::Name, PhiCategory::Date]),
    ("patient can be contacted on {} regarding results.", &[PhiCategory::Phone]),
    ("referral letter sent to {} about blood pressure 120/80.", &[PhiCategory::Email]),
    ("nhs number {} confirmed at reception.", &[PhiCategory::Id]),
    ("lives at postcode {} with her daughter.", &[PhiCategory::Postcode]),
    ("a {} year old man with chest pain, dose 500 mg given.", &[PhiCategory::AgeOver89]),
    ("discharged on {} and follow up with {} in 6 weeks.", &[PhiCategory::Date, PhiCategory::Name]),
    ("hospital number {} and phone {} updated.", &[PhiCategory::Id, PhiCategory::Phone]),
    ("aged 45 years, reviewed on {} by the team.", &[PhiCategory::Date]),
    ("email {} or call {} if worse.", &[PhiCategory::Email, PhiCategory::Phone]),
];

pub fn phi_corpus<R: Rng>(rng: &mut R, n: usize) -> Vec<PhiCase> {
    (0..n)
        .map(|_| {
            let (template, slots) = PHI_TEMPLATES.choose(rng).unwrap();
            let mut text = String::new();
            let mut gold = Vec::new();
            let parts: Vec<&str> = template.split("{}").collect();
            for (i, part) in parts.iter().enumerate() {
                text.push_str(part);
                if let Some(&cat) = slots.get(i) {
                    let mut value = phi_value(rng, cat);
                    if cat == PhiCategory::Name && text.ends_with("by ") && rng.gen_bool(0.5) {
                        text.push_str(TITLES.choose(rng).unwrap());
                        text.push(' ');
                        value = LAST.choose(rng).unwrap().to_string();
                    }
                    let start = text.chars().count();
                    text.push_str(&value);
                    gold.push((start, text.chars().count(), cat));
                }
            }
            PhiCase { text, gold }
        })
        .collect()
}

// ---------------------------------------------------------- eligibility

pub fn random_patient<R: Rng>(rng: &mut R, patient: &str) -> Vec<ClinicalEvent> {
    let cuis = ["I1", "I2", "I3", "X1", "X2", "O1"];
    let n = rng.gen_range(0..=50);
    let mut events: Vec<ClinicalEvent> = (0..n)
        .map(|i| ClinicalEvent {
            patient_id: patient.into(),
            cui: cuis.choose(rng).unwrap().to_string(),
            timestamp: base_time() + Duration::minutes(rng.gen_range(0..600)),
            doc_id: format!("{patient}-{i}"),
        })
        .collect();
    events.sort();
    events
}

/// A random rule; window-only exclusion lookback is drawn when `window_mode`.
pub fn random_rule<R: Rng>(rng: &mut R, window_mode: bool) -> EligibilityRule {
    let inc: Vec<&str> = ["I1", "I2", "I3"][..rng.gen_range(1..=3)].to_vec();
    let exc: Vec<&str> = ["X1", "X2"][..rng.gen_range(0..=2)].to_vec();
    let mut rule = EligibilityRule::new(inc, exc, rng.gen_range(1..=120));
    if window_mode && rng.gen_bool(0.5) {
        rule.exclusion_lookback = ExclusionLookback::Window;
    }
    rule
}

/// Earliest whole minute at which the rule holds, scanning every minute from
/// the first to the last event.
pub fn minute_scan(events: &[ClinicalEvent], rule: &EligibilityRule) -> Option<DateTime<Utc>> {
    let first = events.iter().map(|e| e.timestamp).min()?;
    let last = events.iter().map(|e| e.timestamp).max()?;
    let d = Duration::minutes(rule.window_minutes);
    let mut t = first;
    while t <= last + d {
        let in_window = |e: &ClinicalEvent| e.timestamp <= t && e.timestamp >= t - d;
        let included = rule.inclusion.iter().all(|c| events.iter().any(|e| &e.cui == c && in_window(e)));
        let excluded = events.iter().any(|e| {
            rule.exclusion.contains(&e.cui)
                && match rule.exclusion_lookback {
                    ExclusionLookback::FullHistory => e.timestamp <= t,
                    ExclusionLookback::Window => in_window(e),
                }
        });
        if included && !excluded {
            return Some(t);
        }
        t += Duration::minutes(1);
    }
    None
}
