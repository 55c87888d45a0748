//! Annotation projects with model-in-the-loop active learning.
//!
//! Documents are served least-confident first; verdicts are appended to a
//! log and every `batch_size` annotated documents the serving model is
//! rebuilt by replaying the whole log against the project's initial bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Clock, Document, DocumentStore};
use crate::nerl::{evaluate_ner, train_supervised, EntityMention, GoldMention, ModelBundle, NerlError, SupervisedExample};
use crate::text::char_len;

/// Learning rate for supervised concept updates.
pub const SUPERVISED_LR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("unknown project {0}")]
    UnknownProject(String),
    #[error("project has no documents")]
    EmptyDocumentSet,
    #[error("unknown bundle {0}")]
    UnknownBundle(String),
    #[error("document {0} is not in the project's training set")]
    UnknownDocument(String),
    #[error("document {0} is held out for validation")]
    ValidationDocument(String),
    #[error("document {0} has not been served")]
    NotServed(String),
    #[error("no unannotated training documents remain")]
    QueueExhausted,
    #[error("no annotations to train on")]
    NoAnnotations,
    #[error("another training run holds the model lock")]
    TrainingInProgress,
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("invalid project: {0}")]
    InvalidProject(String),
    #[error(transparent)]
    Model(#[from] NerlError),
    #[error("project store: {0}")]
    Store(String),
}

fn store_err(e: impl std::fmt::Display) -> AnnotateError {
    AnnotateError::Store(e.to_string())
}

fn default_batch() -> usize {
    10
}

fn default_fraction() -> f64 {
    0.2
}

/// Request to create a project.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub name: String,
    pub doc_ids: Vec<String>,
    pub bundle_id: String,
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Gold mentions; only those on validation documents are kept.
    #[serde(default)]
    pub gold: Vec<GoldMention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: String,
    pub name: String,
    pub doc_ids: Vec<String>,
    pub bundle_id: String,
    pub tasks: Vec<String>,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub train_docs: Vec<String>,
    pub validation_docs: Vec<String>,
    pub gold: Vec<GoldMention>,
    pub created_at: DateTime<Utc>,
}

/// One verdict as submitted by an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInput {
    pub start: usize,
    pub end: usize,
    pub cui: String,
    pub correct: bool,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAnnotation {
    pub project_id: String,
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub cui: String,
    pub correct: bool,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub annotator: String,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub after_n_docs: usize,
    /// Size of the annotation log the model was rebuilt from.
    pub n_annotations: usize,
    pub per_cui_f1: BTreeMap<String, f64>,
    pub macro_f1: f64,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub accepted: usize,
    pub retrained: Option<MetricsSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedDocument {
    pub document: Document,
    pub mean_confidence: f64,
    pub annotations: Vec<EntityMention>,
}

/// Mean link confidence; a document with no mentions counts as certain.
pub fn mean_confidence(mentions: &[EntityMention]) -> f64 {
    if mentions.is_empty() {
        1.0
    } else {
        mentions.iter().map(|m| m.confidence).sum::<f64>() / mentions.len() as f64
    }
}

/// Rebuilds a bundle by applying every annotation, in order, to a copy of
/// `initial`.
pub fn replay(initial: &ModelBundle, annotations: &[HumanAnnotation], docs: &DocumentStore) -> Result<ModelBundle, AnnotateError> {
    let mut bundle = initial.clone();
    let examples: Vec<SupervisedExample> = annotations
        .iter()
        .map(|a| {
            let doc = docs.get(&a.doc_id).ok_or_else(|| AnnotateError::UnknownDocument(a.doc_id.clone()))?;
            Ok(SupervisedExample {
                text: doc.text.clone(),
                start: a.start,
                end: a.end,
                cui: a.cui.clone(),
                correct: a.correct,
            })
        })
        .collect::<Result<_, AnnotateError>>()?;
    let link = bundle.config.link.clone();
    train_supervised(&examples, &mut bundle.cdb, &bundle.vocab, SUPERVISED_LR, &link)?;
    Ok(bundle)
}

/// Scores `bundle` against the gold mentions of `validation_docs`.
pub fn validation_metrics(bundle: &ModelBundle, project: &Project, docs: &DocumentStore) -> (BTreeMap<String, f64>, f64) {
    let mut predicted = Vec::new();
    for id in &project.validation_docs {
        if let Some(doc) = docs.get(id) {
            predicted.extend(bundle.annotate_text(&doc.text).into_iter().map(|m| GoldMention {
                doc_id: id.clone(),
                start: m.start,
                end: m.end,
                cui: m.cui,
            }));
        }
    }
    let report = evaluate_ner(&project.gold, &predicted);
    (report.per_cui.into_iter().map(|(c, s)| (c, s.f1)).collect(), report.macro_f1)
}

#[derive(Debug, Default)]
struct Log {
    annotations: Vec<HumanAnnotation>,
    annotated: BTreeSet<String>,
    served: BTreeSet<String>,
    snapshots: Vec<MetricsSnapshot>,
}

struct ProjectState {
    project: Project,
    initial: Arc<ModelBundle>,
    serving: RwLock<Arc<ModelBundle>>,
    log: Mutex<Log>,
    train_lock: TrainLock,
}

#[derive(Default)]
struct TrainLock {
    busy: Mutex<bool>,
    released: Condvar,
}

/// Exclusive hold on a project's model. Retraining fails with
/// `TrainingInProgress` while one is alive.
pub struct TrainingLease {
    state: Arc<ProjectState>,
}

impl Drop for TrainingLease {
    fn drop(&mut self) {
        let lock = &self.state.train_lock;
        *lock.busy.lock().unwrap_or_else(|p| p.into_inner()) = false;
        lock.released.notify_all();
    }
}

fn try_lease(state: &Arc<ProjectState>) -> Result<TrainingLease, AnnotateError> {
    let mut busy = state.train_lock.busy.lock().unwrap_or_else(|p| p.into_inner());
    if *busy {
        return Err(AnnotateError::TrainingInProgress);
    }
    *busy = true;
    Ok(TrainingLease { state: state.clone() })
}

fn wait_lease(state: &Arc<ProjectState>) -> TrainingLease {
    let lock = &state.train_lock;
    let mut busy = lock.busy.lock().unwrap_or_else(|p| p.into_inner());
    while *busy {
        busy = lock.released.wait(busy).unwrap_or_else(|p| p.into_inner());
    }
    *busy = true;
    TrainingLease { state: state.clone() }
}

/// Holds projects, the bundle registry and a handle on the document store.
pub struct AnnotationService {
    docs: Arc<RwLock<DocumentStore>>,
    bundles: RwLock<BTreeMap<String, Arc<ModelBundle>>>,
    projects: RwLock<BTreeMap<String, Arc<ProjectState>>>,
    clock: Arc<dyn Clock>,
    dir: Option<PathBuf>,
}

const PROJECT_FILE: &str = "project.json";
const ANNOTATIONS_FILE: &str = "annotations.jsonl";
const SNAPSHOTS_FILE: &str = "snapshots.jsonl";

fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<(), AnnotateError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(store_err)?;
    let mut line = serde_json::to_vec(item).map_err(store_err)?;
    line.push(b'\n');
    f.write_all(&line).map_err(store_err)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AnnotateError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).map_err(store_err)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(store_err)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(store_err)?);
        }
    }
    Ok(out)
}

impl AnnotationService {
    pub fn new(docs: Arc<RwLock<DocumentStore>>, clock: Arc<dyn Clock>) -> Self {
        Self {
            docs,
            bundles: RwLock::new(BTreeMap::new()),
            projects: RwLock::new(BTreeMap::new()),
            clock,
            dir: None,
        }
    }

    /// Like [`AnnotationService::new`], persisting projects under `dir`.
    /// Call [`AnnotationService::reload_projects`] after registering bundles
    /// to restore earlier projects.
    pub fn with_persistence(docs: Arc<RwLock<DocumentStore>>, clock: Arc<dyn Clock>, dir: &Path) -> Result<Self, AnnotateError> {
        fs::create_dir_all(dir).map_err(store_err)?;
        let mut s = Self::new(docs, clock);
        s.dir = Some(dir.to_path_buf());
        Ok(s)
    }

    pub fn register_bundle(&self, bundle_id: &str, bundle: ModelBundle) {
        self.bundles.write().unwrap().insert(bundle_id.to_string(), Arc::new(bundle));
    }

    pub fn bundle(&self, bundle_id: &str) -> Option<Arc<ModelBundle>> {
        self.bundles.read().unwrap().get(bundle_id).cloned()
    }

    pub fn bundle_ids(&self) -> Vec<String> {
        self.bundles.read().unwrap().keys().cloned().collect()
    }

    fn state(&self, project_id: &str) -> Result<Arc<ProjectState>, AnnotateError> {
        self.projects
            .read()
            .unwrap()
            .get(project_id)
            .cloned()
            .ok_or_else(|| AnnotateError::UnknownProject(project_id.to_string()))
    }

    fn project_dir(&self, project_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(project_id))
    }

    pub fn project(&self, project_id: &str) -> Result<Project, AnnotateError> {
        Ok(self.state(project_id)?.project.clone())
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.projects.read().unwrap().keys().cloned().collect()
    }

    /// The model currently used for suggestions.
    pub fn serving_bundle(&self, project_id: &str) -> Result<Arc<ModelBundle>, AnnotateError> {
        Ok(self.state(project_id)?.serving.read().unwrap().clone())
    }

    pub fn annotations(&self, project_id: &str) -> Result<Vec<HumanAnnotation>, AnnotateError> {
        Ok(self.state(project_id)?.log.lock().unwrap().annotations.clone())
    }

    pub fn create_project(&self, spec: ProjectSpec) -> Result<String, AnnotateError> {
        let unique: BTreeSet<&String> = spec.doc_ids.iter().collect();
        if spec.doc_ids.is_empty() {
            return Err(AnnotateError::EmptyDocumentSet);
        }
        if unique.len() != spec.doc_ids.len() {
            return Err(AnnotateError::InvalidProject("duplicate document ids".into()));
        }
        if spec.batch_size == 0 {
            return Err(AnnotateError::InvalidProject("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&spec.validation_fraction) {
            return Err(AnnotateError::InvalidProject("validation_fraction must be in [0, 1)".into()));
        }
        let initial = self
            .bundle(&spec.bundle_id)
            .ok_or_else(|| AnnotateError::UnknownBundle(spec.bundle_id.clone()))?;
        {
            let docs = self.docs.read().unwrap();
            if let Some(missing) = spec.doc_ids.iter().find(|d| docs.get(d).is_none()) {
                return Err(AnnotateError::InvalidProject(format!("document {missing} is not in the store")));
            }
        }

        let mut shuffled = spec.doc_ids.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
        let n_val = (spec.validation_fraction * shuffled.len() as f64).round() as usize;
        let mut validation_docs = shuffled[..n_val].to_vec();
        let mut train_docs = shuffled[n_val..].to_vec();
        validation_docs.sort();
        train_docs.sort();
        let val_set: BTreeSet<&String> = validation_docs.iter().collect();
        let gold = spec.gold.iter().filter(|g| val_set.contains(&g.doc_id)).cloned().collect();

        let mut projects = self.projects.write().unwrap();
        let project_id = format!("prj-{:04}", projects.len() + 1);
        let project = Project {
            project_id: project_id.clone(),
            name: spec.name,
            doc_ids: spec.doc_ids,
            bundle_id: spec.bundle_id,
            tasks: spec.tasks,
            batch_size: spec.batch_size,
            validation_fraction: spec.validation_fraction,
            seed: spec.seed,
            train_docs,
            validation_docs,
            gold,
            created_at: self.clock.now(),
        };
        if let Some(dir) = self.project_dir(&project_id) {
            fs::create_dir_all(&dir).map_err(store_err)?;
            let json = serde_json::to_vec_pretty(&project).map_err(store_err)?;
            fs::write(dir.join(PROJECT_FILE), json).map_err(store_err)?;
        }
        projects.insert(
            project_id.clone(),
            Arc::new(ProjectState {
                project,
                serving: RwLock::new(initial.clone()),
                initial,
                log: Mutex::new(Log::default()),
                train_lock: TrainLock::default(),
            }),
        );
        Ok(project_id)
    }

    /// Restores persisted projects whose bundles are registered.
    pub fn reload_projects(&self) -> Result<usize, AnnotateError> {
        let Some(dir) = &self.dir else { return Ok(0) };
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(store_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(PROJECT_FILE).exists())
            .collect();
        entries.sort();
        let mut loaded = 0;
        for path in entries {
            let project: Project = serde_json::from_slice(&fs::read(path.join(PROJECT_FILE)).map_err(store_err)?).map_err(store_err)?;
            let initial = self
                .bundle(&project.bundle_id)
                .ok_or_else(|| AnnotateError::UnknownBundle(project.bundle_id.clone()))?;
            let annotations: Vec<HumanAnnotation> = read_jsonl(&path.join(ANNOTATIONS_FILE))?;
            let snapshots: Vec<MetricsSnapshot> = read_jsonl(&path.join(SNAPSHOTS_FILE))?;
            let serving = match snapshots.last() {
                Some(s) => {
                    let upto = s.n_annotations.min(annotations.len());
                    Arc::new(replay(&initial, &annotations[..upto], &self.docs.read().unwrap())?)
                }
                None => initial.clone(),
            };
            let annotated: BTreeSet<String> = annotations.iter().map(|a| a.doc_id.clone()).collect();
            let log = Log {
                served: annotated.clone(),
                annotated,
                annotations,
                snapshots,
            };
            self.projects.write().unwrap().insert(
                project.project_id.clone(),
                Arc::new(ProjectState {
                    project,
                    initial,
                    serving: RwLock::new(serving),
                    log: Mutex::new(log),
                    train_lock: TrainLock::default(),
                }),
            );
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Serves the unannotated training document the current model is least
    /// confident about (ties by doc id), with its suggestions.
    pub fn next_document(&self, project_id: &str, _annotator: &str) -> Result<ServedDocument, AnnotateError> {
        let state = self.state(project_id)?;
        let bundle = state.serving.read().unwrap().clone();
        let pending: Vec<String> = {
            let log = state.log.lock().unwrap();
            state
                .project
                .train_docs
                .iter()
                .filter(|d| !log.annotated.contains(*d))
                .cloned()
                .collect()
        };
        let docs = self.docs.read().unwrap();
        let mut best: Option<ServedDocument> = None;
        for id in pending {
            let Some(doc) = docs.get(&id) else { continue };
            let annotations = bundle.annotate_text(&doc.text);
            let conf = mean_confidence(&annotations);
            if best.as_ref().is_none_or(|b| conf < b.mean_confidence) {
                best = Some(ServedDocument {
                    document: doc.clone(),
                    mean_confidence: conf,
                    annotations,
                });
            }
        }
        let served = best.ok_or(AnnotateError::QueueExhausted)?;
        state.log.lock().unwrap().served.insert(served.document.doc_id.clone());
        Ok(served)
    }

    /// Stores verdicts for a served training document. Retrains when the
    /// number of annotated documents reaches a multiple of the batch size.
    pub fn submit_annotations(
        &self,
        project_id: &str,
        doc_id: &str,
        annotator: &str,
        inputs: Vec<AnnotationInput>,
    ) -> Result<SubmitOutcome, AnnotateError> {
        let state = self.state(project_id)?;
        let project = &state.project;
        if project.validation_docs.iter().any(|d| d == doc_id) {
            return Err(AnnotateError::ValidationDocument(doc_id.to_string()));
        }
        if !project.train_docs.iter().any(|d| d == doc_id) {
            return Err(AnnotateError::UnknownDocument(doc_id.to_string()));
        }
        let text_len = {
            let docs = self.docs.read().unwrap();
            let doc = docs.get(doc_id).ok_or_else(|| AnnotateError::UnknownDocument(doc_id.to_string()))?;
            char_len(&doc.text)
        };
        let mut seen = BTreeSet::new();
        let mut rows = Vec::new();
        let now = self.clock.now();
        for a in inputs {
            if a.start >= a.end || a.end > text_len {
                return Err(AnnotateError::InvalidAnnotation(format!("span {}..{} outside document", a.start, a.end)));
            }
            if state.initial.cdb.concept(&a.cui).is_none() {
                return Err(AnnotateError::InvalidAnnotation(format!("unknown concept {}", a.cui)));
            }
            if !seen.insert((a.start, a.end, a.cui.clone())) {
                continue;
            }
            rows.push(HumanAnnotation {
                project_id: project_id.to_string(),
                doc_id: doc_id.to_string(),
                start: a.start,
                end: a.end,
                cui: a.cui,
                correct: a.correct,
                meta: a.meta,
                annotator: annotator.to_string(),
                submitted_at: now,
            });
        }

        let accepted = rows.len();
        let due = {
            let mut log = state.log.lock().unwrap();
            if !log.served.contains(doc_id) {
                return Err(AnnotateError::NotServed(doc_id.to_string()));
            }
            if let Some(dir) = self.project_dir(project_id) {
                for r in &rows {
                    append_jsonl(&dir.join(ANNOTATIONS_FILE), r)?;
                }
            }
            log.annotations.extend(rows);
            let newly = log.annotated.insert(doc_id.to_string());
            // a batch of documents without any verdicts has nothing to train on
            newly && log.annotated.len() % project.batch_size == 0 && !log.annotations.is_empty()
        };
        let retrained = if due { Some(self.retrain_blocking(&state)?) } else { None };
        Ok(SubmitOutcome { accepted, retrained })
    }

    /// Rebuilds the serving model from the full log and appends a snapshot.
    /// Fails with `TrainingInProgress` if another retrain is running.
    pub fn retrain(&self, project_id: &str) -> Result<MetricsSnapshot, AnnotateError> {
        let state = self.state(project_id)?;
        let lease = try_lease(&state)?;
        self.retrain_locked(&state, lease)
    }

    fn retrain_blocking(&self, state: &Arc<ProjectState>) -> Result<MetricsSnapshot, AnnotateError> {
        let lease = wait_lease(state);
        self.retrain_locked(state, lease)
    }

    fn retrain_locked(&self, state: &ProjectState, _lease: TrainingLease) -> Result<MetricsSnapshot, AnnotateError> {
        let (annotations, after_n_docs) = {
            let log = state.log.lock().unwrap();
            (log.annotations.clone(), log.annotated.len())
        };
        if annotations.is_empty() {
            return Err(AnnotateError::NoAnnotations);
        }
        let (bundle, per_cui_f1, macro_f1) = {
            let docs = self.docs.read().unwrap();
            let bundle = replay(&state.initial, &annotations, &docs)?;
            let (per_cui_f1, macro_f1) = validation_metrics(&bundle, &state.project, &docs);
            (bundle, per_cui_f1, macro_f1)
        };
        *state.serving.write().unwrap() = Arc::new(bundle);

        let mut log = state.log.lock().unwrap();
        if let Some(last) = log.snapshots.last() {
            if last.after_n_docs >= after_n_docs {
                return Ok(last.clone());
            }
        }
        let snapshot = MetricsSnapshot {
            after_n_docs,
            n_annotations: annotations.len(),
            per_cui_f1,
            macro_f1,
            created_at: self.clock.now(),
        };
        if let Some(dir) = self.project_dir(&state.project.project_id) {
            append_jsonl(&dir.join(SNAPSHOTS_FILE), &snapshot)?;
        }
        log.snapshots.push(snapshot.clone());
        Ok(snapshot)
    }

    /// Takes the project's training lock without training, failing if it is
    /// already held.
    pub fn lease_training(&self, project_id: &str) -> Result<TrainingLease, AnnotateError> {
        try_lease(&self.state(project_id)?)
    }

    pub fn metrics_timeline(&self, project_id: &str) -> Result<Vec<MetricsSnapshot>, AnnotateError> {
        Ok(self.state(project_id)?.log.lock().unwrap().snapshots.clone())
    }
}
