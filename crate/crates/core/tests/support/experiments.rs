// Measured experiments shared by the core property tests and the acceptance
// runner. Each returns raw counts so callers choose their own thresholds.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, RwLock};

use chrono::{TimeZone, Utc};
use medtext::annotate::{replay, AnnotateError, AnnotationInput, AnnotationService, ProjectSpec};

use medtext::cohort::{evaluate_eligibility, ClinicalEvent, ExclusionLookback};
use medtext::deid::{detect_phi, redact, DeidConfig};
use medtext::index::AggregateBy;
use medtext::ingest::{DocumentStore, FlowEngine, FlowGraph, FlowNode, FlowRunReport, ManualClock, NodeKind};
use medtext::nerl::vector::{cosine, normalize};
use medtext::nerl::{
    build_cdb, compute_context_vector, detect_candidates, link_entities, meta_features, softmax_loss_gradient,
    train_meta, train_self_supervised, train_supervised, train_word_embeddings, ConceptDatabase, LinkConfig,
    GoldMention, MetaConfig, MetaExample, ModelBundle, OntologyRow, SupervisedExample, Vocab, Word2VecConfig,
};
use medtext::{parse_query, tokenize, DocType, Document, InvertedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::oracles::{
    inject_names, meta_cases, minute_scan, phi_corpus, random_ontology, random_patient, random_rule, sense_corpus,
    sense_ontology, sense_sentence, SENSE_DISEASE, SENSE_TEMPERATURE,
};

// ------------------------------------------------------------ detection

pub struct Recall {
    pub found: usize,
    pub total: usize,
    /// Distinct (cui, name) pairs in the ontology and how many were injected.
    pub names: usize,
    pub names_injected: usize,
    pub misses: Vec<String>,
}

/// Injects ontology names into filler text and checks that each injection is
/// detected with exactly its token span and with its concept among the
/// candidates. Every name is injected at least once; the rest are drawn at
/// random.
pub fn ner_recall(seed: u64, concepts: usize, docs: usize, per_doc: usize) -> Recall {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = random_ontology(&mut rng, concepts);
    let cdb = build_cdb(&rows).unwrap();
    let mut queue: Vec<&OntologyRow> = rows.iter().collect();
    queue.shuffle(&mut rng);
    while queue.len() < docs * per_doc {
        queue.push(rows.choose(&mut rng).unwrap());
    }
    queue[rows.len()..].shuffle(&mut rng);
    let names: BTreeSet<(&str, &str)> = rows.iter().map(|r| (r.cui.as_str(), r.name.as_str())).collect();
    let mut injected = BTreeSet::new();
    let mut out = Recall {
        found: 0,
        total: 0,
        names: names.len(),
        names_injected: 0,
        misses: Vec::new(),
    };
    for chunk in queue.chunks(per_doc.max(1)) {
        let (text, injections) = inject_names(&mut rng, chunk);
        let tokens = tokenize(&text);
        let cands = detect_candidates(&tokens, &cdb);
        for inj in &injections {
            out.total += 1;
            injected.insert((inj.cui.clone(), inj.name.clone()));
            let hit = cands.iter().any(|c| {
                tokens[c.token_start].start == inj.start
                    && tokens[c.token_end - 1].end == inj.end
                    && c.cuis.contains(&inj.cui)
            });
            if hit {
                out.found += 1;
            } else {
                out.misses.push(format!("{} ({}) at {}..{}", inj.name, inj.cui, inj.start, inj.end));
            }
        }
    }
    out.names_injected = injected.len();
    out
}

// ------------------------------------------------------- disambiguation

pub struct Disambiguation {
    pub correct: usize,
    pub total: usize,
    /// Largest absolute difference between concept means trained on the
    /// corpus and on a permutation of it.
    pub permutation_delta: f64,
}

fn sense_vocab(corpus: &[String], seed: u64) -> Vocab {
    let config = Word2VecConfig {
        dim: 24,
        window: 4,
        epochs: 5,
        seed,
        ..Default::default()
    };
    train_word_embeddings(corpus.iter().map(String::as_str), &config).unwrap()
}

fn max_mean_delta(a: &ConceptDatabase, b: &ConceptDatabase) -> f64 {
    let mut delta: f64 = 0.0;
    for c in a.concepts() {
        let other = b.concept(&c.cui).unwrap();
        match (c.mean(), other.mean()) {
            (Some(x), Some(y)) => {
                for (p, q) in x.iter().zip(y) {
                    delta = delta.max((p - q).abs());
                }
            }
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    delta
}

pub fn disambiguation(seed: u64, train_docs: usize, test_mentions: usize) -> Disambiguation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = sense_corpus(&mut rng, train_docs);
    let vocab = sense_vocab(&corpus, seed);
    let config = LinkConfig::default();

    let mut cdb = build_cdb(&sense_ontology()).unwrap();
    train_self_supervised(corpus.iter().map(String::as_str), &mut cdb, &vocab, &config);

    let mut shuffled = corpus.clone();
    shuffled.shuffle(&mut rng);
    let mut permuted = build_cdb(&sense_ontology()).unwrap();
    train_self_supervised(shuffled.iter().map(String::as_str), &mut permuted, &vocab, &config);

    let mut correct = 0;
    for i in 0..test_mentions {
        let sense = if i % 2 == 0 { SENSE_DISEASE } else { SENSE_TEMPERATURE };
        let (text, start, _) = sense_sentence(&mut rng, sense, "cold");
        let tokens = tokenize(&text);
        let cands = detect_candidates(&tokens, &cdb);
        let linked = link_entities(&cands, &tokens, &cdb, &vocab, &config);
        if linked.iter().any(|m| m.start == start && m.cui == sense) {
            correct += 1;
        }
    }
    Disambiguation {
        correct,
        total: test_mentions,
        permutation_delta: max_mean_delta(&cdb, &permuted),
    }
}

// ---------------------------------------------------------- fine-tuning

pub struct Direction {
    pub consistent: usize,
    pub tested: usize,
}

fn random_vocab<R: Rng>(rng: &mut R, words: &[String], dim: usize) -> Vocab {
    Vocab::from_vectors(
        words
            .iter()
            .map(|w| (w.clone(), 1, (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()))
            .collect(),
    )
    .unwrap()
}

/// After a positive verdict the concept vector moves toward the context;
/// after a negative one it moves away.
pub fn fine_tuning_direction(seed: u64, instances: usize) -> Direction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let vocab = random_vocab(&mut rng, &words, 8);
    let config = LinkConfig::default();
    let sentence = |rng: &mut ChaCha8Rng| {
        let left: Vec<&str> = (0..4).map(|_| words.choose(rng).unwrap().as_str()).collect();
        let right: Vec<&str> = (0..4).map(|_| words.choose(rng).unwrap().as_str()).collect();
        let left = left.join(" ");
        let start = left.len() + 1;
        (format!("{left} target {}", right.join(" ")), start, start + 6)
    };
    let mut out = Direction {
        consistent: 0,
        tested: 0,
    };
    while out.tested < instances {
        let mut cdb = build_cdb(&[OntologyRow::new("C1", "target", true)]).unwrap();
        let (seed_text, s0, e0) = sentence(&mut rng);
        let init = SupervisedExample {
            text: seed_text,
            start: s0,
            end: e0,
            cui: "C1".into(),
            correct: true,
        };
        train_supervised(&[init], &mut cdb, &vocab, 1.0, &config).unwrap();
        let (text, start, end) = sentence(&mut rng);
        let tokens = tokenize(&text);
        let ctx = compute_context_vector(&tokens, 4, 5, &vocab, config.window).unwrap();
        let before = cosine(cdb.concept("C1").unwrap().mean().unwrap(), &ctx);
        if before.abs() > 1.0 - 1e-9 {
            continue;
        }
        let positive = rng.gen_bool(0.5);
        let lr = rng.gen_range(0.05..0.9);
        let ex = SupervisedExample {
            text,
            start,
            end,
            cui: "C1".into(),
            correct: positive,
        };
        let report = train_supervised(&[ex], &mut cdb, &vocab, lr, &config).unwrap();
        assert_eq!(report.applied, 1);
        let after = cosine(cdb.concept("C1").unwrap().mean().unwrap(), &ctx);
        out.tested += 1;
        if (positive && after > before) || (!positive && after < before) {
            out.consistent += 1;
        }
    }
    out
}

/// Context vectors have unit norm, computed here without the library.
pub fn oracle_context(words: &[String], start: usize, end: usize, vocab: &Vocab, window: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; vocab.dim()];
    let mut n = 0;
    let lo = start.saturating_sub(window);
    let hi = (end + window).min(words.len());
    for (i, w) in words.iter().enumerate().take(hi).skip(lo) {
        if (start..end).contains(&i) {
            continue;
        }
        if let Some(v) = vocab.vector(w) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    sum.iter_mut().for_each(|x| *x /= n as f64);
    normalize(&mut sum).then_some(sum)
}

// ---------------------------------------------------------------- meta

pub struct MetaScores {
    pub task: String,
    pub correct: usize,
    pub total: usize,
    /// Largest |Σp − 1| over the held-out set.
    pub softmax_error: f64,
    /// Largest relative error between the analytic and numeric gradient.
    pub gradient_error: f64,
}

fn meta_vocab(seed: u64) -> Vocab {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut corpus = Vec::new();
    for task in ["negation", "experiencer", "temporality"] {
        corpus.extend(meta_cases(&mut rng, task, 600).into_iter().map(|c| c.text));
    }
    let config = Word2VecConfig {
        dim: 40,
        window: 3,
        epochs: 15,
        seed,
        ..Default::default()
    };
    train_word_embeddings(corpus.iter().map(String::as_str), &config).unwrap()
}

/// Relative error of the analytic gradient against central differences on
/// a random subset of coordinates.
pub fn gradient_check<R: Rng>(rng: &mut R, weights: &[f64], bias: &[f64], xs: &[Vec<f64>], ys: &[usize], l2: f64) -> f64 {
    let (_, gw, gb) = softmax_loss_gradient(weights, bias, xs, ys, l2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / scale);
    };
    for _ in 0..40 {
        let i = rng.gen_range(0..weights.len());
        let (mut wp, mut wm) = (weights.to_vec(), weights.to_vec());
        wp[i] += h;
        wm[i] -= h;
        let plus = softmax_loss_gradient(&wp, bias, xs, ys, l2).0;
        let minus = softmax_loss_gradient(&wm, bias, xs, ys, l2).0;
        check(gw[i], plus, minus);
    }
    for i in 0..bias.len() {
        let (mut bp, mut bm) = (bias.to_vec(), bias.to_vec());
        bp[i] += h;
        bm[i] -= h;
        let plus = softmax_loss_gradient(weights, &bp, xs, ys, l2).0;
        let minus = softmax_loss_gradient(weights, &bm, xs, ys, l2).0;
        check(gb[i], plus, minus);
    }
    worst
}

pub fn meta_task(seed: u64, task: &str) -> MetaScores {
    let vocab = meta_vocab(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = meta_cases(&mut rng, task, 200);
    let examples: Vec<MetaExample> = cases
        .iter()
        .map(|c| MetaExample::from_text(&c.text, c.start, c.end, &c.label).unwrap())
        .collect();
    let (train, test) = examples.split_at(150);
    let config = MetaConfig {
        seed,
        ..Default::default()
    };
    let model = train_meta(task, train, &vocab, &config).unwrap();

    let mut correct = 0;
    let mut softmax_error: f64 = 0.0;
    for ex in test {
        let pred = model.predict(&ex.tokens, ex.token_start, ex.token_end, &vocab);
        softmax_error = softmax_error.max((pred.probabilities.iter().sum::<f64>() - 1.0).abs());
        if pred.label == ex.label {
            correct += 1;
        }
    }

    let xs: Vec<Vec<f64>> = test
        .iter()
        .map(|e| meta_features(&e.tokens, e.token_start, e.token_end, &vocab, model.k))
        .collect();
    let ys: Vec<usize> = test.iter().map(|e| model.labels.iter().position(|l| *l == e.label).unwrap_or(0)).collect();
    // check around both a random point and the trained optimum
    let random_w: Vec<f64> = model.weights.iter().map(|_| rng.gen::<f64>() - 0.5).collect();
    let random_b: Vec<f64> = model.bias.iter().map(|_| rng.gen::<f64>() - 0.5).collect();
    let gradient_error = gradient_check(&mut rng, &random_w, &random_b, &xs, &ys, config.l2)
        .max(gradient_check(&mut rng, &model.weights, &model.bias, &xs, &ys, config.l2));

    MetaScores {
        task: task.into(),
        correct,
        total: test.len(),
        softmax_error,
        gradient_error,
    }
}

// ---------------------------------------------------------------- de-id

pub struct DeidScores {
    pub gold: usize,
    pub recalled: usize,
    pub detected: usize,
    pub true_detections: usize,
    pub fixpoint_failures: usize,
    pub misses: Vec<String>,
}

pub fn deid_scores(seed: u64, n: usize) -> DeidScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = DeidConfig::default();
    let mut s = DeidScores {
        gold: 0,
        recalled: 0,
        detected: 0,
        true_detections: 0,
        fixpoint_failures: 0,
        misses: Vec::new(),
    };
    for case in phi_corpus(&mut rng, n) {
        let spans = detect_phi(&case.text, &config);
        for &(gs, ge, cat) in &case.gold {
            s.gold += 1;
            if spans.iter().any(|p| p.start <= gs && p.end >= ge && p.category == cat) {
                s.recalled += 1;
            } else {
                s.misses.push(format!("{cat} {gs}..{ge} in {:?}", case.text));
            }
        }
        for p in &spans {
            s.detected += 1;
            if case.gold.iter().any(|&(gs, ge, _)| p.start < ge && gs < p.end) {
                s.true_detections += 1;
            }
        }
        let once = redact(&case.text, &spans, &config).unwrap();
        if !detect_phi(&once, &config).is_empty() {
            s.fixpoint_failures += 1;
        }
    }
    s
}

// ---------------------------------------------------------- eligibility

pub struct EligibilityAgreement {
    pub patients: usize,
    pub agree: usize,
    pub disagreements: Vec<String>,
}

/// Compares rule evaluation with a minute-by-minute scan. Full-history rules
/// must match the scan exactly; window-mode exclusions can expire between
/// whole minutes, so there the earliest instant may precede the scan's by
/// less than a minute.
pub fn eligibility_agreement(seed: u64, patients: usize, window_mode: bool) -> EligibilityAgreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EligibilityAgreement {
        patients,
        agree: 0,
        disagreements: Vec::new(),
    };
    for p in 0..patients {
        let events: Vec<ClinicalEvent> = random_patient(&mut rng, &format!("P{p:04}"));
        let rule = random_rule(&mut rng, window_mode);
        let got = evaluate_eligibility(&events, &rule).unwrap();
        let want = minute_scan(&events, &rule);
        let ok = match (got.index_date, want) {
            (None, None) => !got.eligible,
            (Some(g), Some(w)) if got.eligible => match rule.exclusion_lookback {
                ExclusionLookback::FullHistory => g == w,
                ExclusionLookback::Window => g <= w && w - g < chrono::Duration::minutes(1),
            },
            _ => false,
        };
        if ok {
            out.agree += 1;
        } else {
            out.disagreements.push(format!("P{p:04}: got {:?}, scan {want:?}", got.index_date));
        }
    }
    out
}

pub fn count_labels(labels: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(l.as_str()).or_default() += 1;
    }
    m
}

// ------------------------------------------------------------ ingestion

pub struct IngestChecks {
    /// Nodes whose read count differs from written + failed, or from what
    /// their inputs delivered.
    pub conservation_violations: Vec<String>,
    pub expected_failed: u64,
    pub failed: u64,
    pub expected_stored: usize,
    pub stored: usize,
    pub rerun_identical: bool,
    pub census: BTreeMap<String, usize>,
    pub aggregated: BTreeMap<String, usize>,
}

const DOC_TYPES: [&str; 4] = ["clinical_note", "imaging_report", "letter", "other"];

fn ingest_fixture(rng: &mut ChaCha8Rng, dir: &Path, records: usize) -> (FlowGraph, u64, BTreeMap<String, usize>) {
    let mut census: BTreeMap<String, usize> = BTreeMap::new();
    let mut bad = 0;
    let mut json_lines = Vec::new();
    let mut csv_lines = Vec::new();
    for i in 0..records {
        let doc_type = DOC_TYPES[rng.gen_range(0..DOC_TYPES.len())];
        let ts = format!("2021-{:02}-{:02}T{:02}:30:00Z", rng.gen_range(1..=12), rng.gen_range(1..=28), rng.gen_range(0..24));
        let text = format!("Seen by Dr Smith, note {i}: fever and cough");
        let broken = rng.gen_bool(0.2);
        if broken {
            bad += 1;
        } else {
            *census.entry(doc_type.to_string()).or_default() += 1;
        }
        if i % 3 == 0 {
            let (doc_type, ts) = match (broken, rng.gen_range(0..2)) {
                (true, 0) => ("memo", ts.as_str()),
                (true, _) => (doc_type, "last tuesday"),
                _ => (doc_type, ts.as_str()),
            };
            csv_lines.push(format!("c{i},p{},{doc_type},{ts},\"{text}\"", i % 7));
        } else if broken {
            json_lines.push(match rng.gen_range(0..3) {
                0 => format!("{{\"id\":\"j{i}\",\"pid\":\"p1\""),
                1 => format!("{{\"id\":\"j{i}\",\"pid\":\"p1\",\"type\":\"{doc_type}\",\"body\":\"{text}\"}}"),
                _ => format!("{{\"id\":\"j{i}\",\"pid\":\"p1\",\"type\":\"memo\",\"ts\":\"{ts}\",\"body\":\"{text}\"}}"),
            });
        } else {
            json_lines.push(format!(
                "{{\"id\":\"j{i}\",\"pid\":\"p{}\",\"type\":\"{doc_type}\",\"ts\":\"{ts}\",\"body\":\"{text}\"}}",
                i % 7
            ));
        }
    }
    let jsonl = dir.join("notes.jsonl");
    let csv = dir.join("letters.csv");
    std::fs::write(&jsonl, json_lines.join("\n")).unwrap();
    std::fs::write(&csv, csv_lines.join("\n")).unwrap();

    let node = |id: &str, kind: NodeKind, config: serde_json::Value| FlowNode {
        node_id: id.into(),
        kind,
        config: config.as_object().cloned().unwrap_or_default(),
    };
    let graph = FlowGraph {
        flow_id: "fixture".into(),
        nodes: vec![
            node("notes", NodeKind::Source, json!({"format": "jsonl", "path": jsonl})),
            node("letters", NodeKind::Source, json!({"format": "csv", "path": csv})),
            node(
                "extract_notes",
                NodeKind::Transform,
                json!({"op": "extract", "mapping": {"doc_id": "id", "patient_id": "pid", "doc_type": "type", "timestamp": "ts", "text": "body"}}),
            ),
            node(
                "extract_letters",
                NodeKind::Transform,
                json!({"op": "extract", "mapping": {"doc_id": 0, "patient_id": 1, "doc_type": 2, "timestamp": 3, "text": 4}}),
            ),
            node("deid", NodeKind::Transform, json!({"op": "deid"})),
            node("tag", NodeKind::Transform, json!({"op": "set_metadata", "key": "site", "value": "fixture"})),
            node("store", NodeKind::Sink, json!({"target": "store"})),
        ],
        edges: [
            ("notes", "extract_notes"),
            ("letters", "extract_letters"),
            ("extract_notes", "deid"),
            ("extract_letters", "deid"),
            ("deid", "tag"),
            ("tag", "store"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect(),
    };
    (graph, bad, census)
}

fn conservation(graph: &FlowGraph, report: &FlowRunReport, source_records: &BTreeMap<String, u64>) -> Vec<String> {
    let mut out = Vec::new();
    for n in &graph.nodes {
        let c = report.nodes[&n.node_id];
        if c.read != c.written + c.failed {
            out.push(format!("{}: read {} != {} + {}", n.node_id, c.read, c.written, c.failed));
        }
        let delivered: u64 = graph
            .edges
            .iter()
            .filter(|(_, to)| *to == n.node_id)
            .map(|(from, _)| report.nodes[from].written)
            .sum::<u64>()
            + source_records.get(&n.node_id).copied().unwrap_or(0);
        if c.read != delivered {
            out.push(format!("{}: read {} but received {delivered}", n.node_id, c.read));
        }
    }
    out
}

/// Runs a two-source fixture flow with malformed records twice over the same
/// store and checks counts, idempotence and the doc_type census.
pub fn ingestion(seed: u64, dir: &Path, records: usize) -> IngestChecks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (graph, bad, census) = ingest_fixture(&mut rng, dir, records);
    let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()));
    let engine = FlowEngine::new(clock.clone());
    engine.register_flow(graph.clone()).unwrap();
    let store = RwLock::new(DocumentStore::new());

    let first = engine.run_flow("fixture", &store).unwrap();
    let snapshot: Vec<Document> = store.read().unwrap().iter().cloned().collect();
    clock.advance(std::time::Duration::from_secs(3600));
    let second = engine.run_flow("fixture", &store).unwrap();
    let again: Vec<Document> = store.read().unwrap().iter().cloned().collect();

    let sources: BTreeMap<String, u64> = [
        ("notes", std::fs::read_to_string(dir.join("notes.jsonl")).unwrap()),
        ("letters", std::fs::read_to_string(dir.join("letters.csv")).unwrap()),
    ]
    .into_iter()
    .map(|(id, content)| (id.to_string(), content.lines().filter(|l| !l.trim().is_empty()).count() as u64))
    .collect();
    let mut violations = conservation(&graph, &first, &sources);
    violations.extend(conservation(&graph, &second, &sources));

    let mut index = InvertedIndex::new();
    for d in &again {
        index.index_document(d);
    }
    let all = parse_query("*").unwrap();
    let aggregated = index
        .aggregate(&all, &AggregateBy::Terms { field: "doc_type".into() })
        .unwrap()
        .into_iter()
        .map(|b| (b.key, b.count))
        .collect();

    IngestChecks {
        conservation_violations: violations,
        expected_failed: bad,
        failed: first.nodes.values().map(|c| c.failed).sum(),
        expected_stored: records - bad as usize,
        stored: again.len(),
        rerun_identical: snapshot == again && first.nodes == second.nodes && first.errors == second.errors,
        census,
        aggregated,
    }
}

// ------------------------------------------------------ active learning

pub struct ActiveLearning {
    pub batch_f1: Vec<f64>,
    pub replay_identical: bool,
    /// Validation documents that were served, annotated or accepted.
    pub leaks: Vec<String>,
}

fn read_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            read_tree(root, &path, out);
        } else {
            let name = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
}

fn bundle_bytes(bundle: &ModelBundle) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let mut out = BTreeMap::new();
    read_tree(dir.path(), dir.path(), &mut out);
    out
}

/// Simulated annotators work through two batches of an ambiguous-mention
/// project; each document holds "cold" mentions of one sense or the other.
pub fn active_learning(seed: u64, docs: usize, batch_size: usize) -> ActiveLearning {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = sense_corpus(&mut rng, 600);
    let vocab = sense_vocab(&corpus, seed);
    let initial = ModelBundle::new(build_cdb(&sense_ontology()).unwrap(), vocab);

    let mut store = DocumentStore::new();
    let mut gold = Vec::new();
    for i in 0..docs {
        let doc_id = format!("al{i:03}");
        let mut text = String::new();
        for _ in 0..rng.gen_range(1..=3) {
            let sense = if rng.gen_bool(0.5) { SENSE_DISEASE } else { SENSE_TEMPERATURE };
            let (s, start, end) = sense_sentence(&mut rng, sense, "cold");
            let offset = text.chars().count();
            gold.push(GoldMention {
                doc_id: doc_id.clone(),
                start: offset + start,
                end: offset + end,
                cui: sense.to_string(),
            });
            text.push_str(&s);
            text.push_str(". ");
        }
        store.upsert(Document {
            doc_id: doc_id.clone(),
            patient_id: format!("p{}", i % 5),
            doc_type: DocType::ClinicalNote,
            timestamp: Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap(),
            source: "synthetic".into(),
            text,
            metadata: BTreeMap::new(),
        });
    }
    let doc_ids: Vec<String> = store.iter().map(|d| d.doc_id.clone()).collect();
    let docs_handle = Arc::new(RwLock::new(store));
    let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()));
    let svc = AnnotationService::new(docs_handle.clone(), clock);
    svc.register_bundle("senses", initial.clone());
    let pid = svc
        .create_project(ProjectSpec {
            name: "cold".into(),
            doc_ids,
            bundle_id: "senses".into(),
            tasks: vec![],
            batch_size,
            validation_fraction: 0.25,
            seed,
            gold: gold.clone(),
        })
        .unwrap();
    let project = svc.project(&pid).unwrap();
    let is_validation = |d: &str| project.validation_docs.iter().any(|v| v == d);

    let mut leaks = Vec::new();
    for v in &project.validation_docs {
        if project.train_docs.contains(v) {
            leaks.push(format!("{v} in both splits"));
        }
        if !matches!(svc.submit_annotations(&pid, v, "sim", vec![]), Err(AnnotateError::ValidationDocument(_))) {
            leaks.push(format!("{v} accepted a submission"));
        }
    }
    for _ in 0..2 * batch_size {
        let served = svc.next_document(&pid, "sim").unwrap();
        let doc_id = served.document.doc_id.clone();
        if is_validation(&doc_id) {
            leaks.push(format!("{doc_id} served"));
        }
        let mut inputs = Vec::new();
        for m in &served.annotations {
            let truth = gold.iter().find(|g| g.doc_id == doc_id && g.start == m.start && g.end == m.end);
            let correct = truth.is_some_and(|g| g.cui == m.cui);
            inputs.push(AnnotationInput {
                start: m.start,
                end: m.end,
                cui: m.cui.clone(),
                correct,
                meta: BTreeMap::new(),
            });
        }
        for g in gold.iter().filter(|g| g.doc_id == doc_id) {
            if !inputs.iter().any(|a| a.correct && a.start == g.start && a.end == g.end && a.cui == g.cui) {
                inputs.push(AnnotationInput {
                    start: g.start,
                    end: g.end,
                    cui: g.cui.clone(),
                    correct: true,
                    meta: BTreeMap::new(),
                });
            }
        }
        svc.submit_annotations(&pid, &doc_id, "sim", inputs).unwrap();
    }
    for a in svc.annotations(&pid).unwrap() {
        if is_validation(&a.doc_id) {
            leaks.push(format!("{} annotated", a.doc_id));
        }
    }

    let serving = svc.serving_bundle(&pid).unwrap();
    let log = svc.annotations(&pid).unwrap();
    let docs_read = docs_handle.read().unwrap();
    let a = replay(&initial, &log, &docs_read).unwrap();
    let b = replay(&initial, &log, &docs_read).unwrap();
    let replay_identical = bundle_bytes(&a) == bundle_bytes(&serving) && bundle_bytes(&b) == bundle_bytes(&a);

    ActiveLearning {
        batch_f1: svc.metrics_timeline(&pid).unwrap().iter().map(|s| s.macro_f1).collect(),
        replay_identical,
        leaks,
    }
}
