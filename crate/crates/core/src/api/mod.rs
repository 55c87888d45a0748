//! Request and response types plus handlers shared by the HTTP service and
//! the command line, so both produce the same JSON payloads.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::annotate::{AnnotateError, AnnotationInput, AnnotationService, MetricsSnapshot, ProjectSpec, SubmitOutcome};
use crate::cohort::{evaluate_cohort, read_events, ClinicalEvent, CohortError, EligibilityRule};
use crate::deid::{detect_phi, redact, DeidConfig, PhiCategory};
use crate::index::{parse_query, AggregateBy, AggregateError, Bucket, DateInterval, InvertedIndex, QueryError, SearchHit};
use crate::ingest::{Clock, Document, DocumentStore, FlowEngine, FlowError, FlowGraph, FlowRunReport, SystemClock};
use crate::nerl::{EntityMention, ModelBundle, BUNDLE_MANIFEST};
use crate::text::char_slice;

pub use config::{ConfigError, ServiceConfig};

/// Largest page a search request may ask for.
pub const MAX_PAGE_SIZE: usize = 10_000;

/// Error body `{code, message}`; `position` is set for query syntax errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
            position: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, "not_found", message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(409, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(500, "internal", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        Self {
            position: Some(e.position),
            ..Self::new(400, "syntax_error", e.message)
        }
    }
}

impl From<AggregateError> for ApiError {
    fn from(e: AggregateError) -> Self {
        Self::bad_request(e.to_string())
    }
}

impl From<FlowError> for ApiError {
    fn from(e: FlowError) -> Self {
        let msg = e.to_string();
        match e {
            FlowError::UnknownFlow(_) => Self::not_found(msg),
            FlowError::FlowBusy(_) => Self::conflict("flow_busy", msg),
            FlowError::SourceUnavailable { .. } => Self::new(422, "source_unavailable", msg),
            FlowError::Persist(_) => Self::internal(msg),
            _ => Self::new(400, "invalid_flow", msg),
        }
    }
}

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        let msg = e.to_string();
        match e {
            AnnotateError::UnknownProject(_) | AnnotateError::UnknownBundle(_) => Self::not_found(msg),
            AnnotateError::TrainingInProgress => Self::conflict("training_in_progress", msg),
            AnnotateError::QueueExhausted => Self::new(404, "queue_exhausted", msg),
            AnnotateError::ValidationDocument(_) => Self::new(422, "validation_document", msg),
            AnnotateError::UnknownDocument(_) | AnnotateError::NotServed(_) => Self::new(422, "not_served", msg),
            AnnotateError::Store(_) => Self::internal(msg),
            _ => Self::bad_request(msg),
        }
    }
}

impl From<CohortError> for ApiError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Io(_) => Self::internal(e.to_string()),
            _ => Self::bad_request(e.to_string()),
        }
    }
}

/// Compact JSON encoding used for every response body.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("response types serialize")
}

// ---- analyze ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub text: String,
    #[serde(default)]
    pub bundle_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityView {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub cui: String,
    pub pretty_name: String,
    pub confidence: f64,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub entities: Vec<EntityView>,
}

pub fn entity_views(text: &str, mentions: &[EntityMention], bundle: &ModelBundle) -> Vec<EntityView> {
    mentions
        .iter()
        .map(|m| EntityView {
            start: m.start,
            end: m.end,
            text: char_slice(text, m.start, m.end).unwrap_or_default().to_string(),
            cui: m.cui.clone(),
            pretty_name: bundle
                .cdb
                .concept(&m.cui)
                .map(|c| c.preferred_name.clone())
                .unwrap_or_default(),
            confidence: m.confidence,
            meta: m.meta.clone(),
        })
        .collect()
}

pub fn analyze(bundle: &ModelBundle, text: &str) -> AnalyzeResponse {
    let mentions = bundle.annotate_text(text);
    AnalyzeResponse {
        entities: entity_views(text, &mentions, bundle),
    }
}

// ---- deid ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeidRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeidSpanView {
    pub start: usize,
    pub end: usize,
    pub category: PhiCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeidResponse {
    pub text: String,
    pub spans: Vec<DeidSpanView>,
}

pub fn deid(config: &DeidConfig, text: &str) -> Result<DeidResponse, ApiError> {
    let spans = detect_phi(text, config);
    let redacted = redact(text, &spans, config).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(DeidResponse {
        text: redacted,
        spans: spans
            .iter()
            .map(|s| DeidSpanView {
                start: s.start,
                end: s.end,
                category: s.category,
            })
            .collect(),
    })
}

// ---- search ----

fn default_size() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub q: String,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub from: usize,
    /// Stored field to bucket by (`doc_type`, `patient_id`, `source`).
    #[serde(default)]
    pub agg_field: Option<String>,
    /// Date histogram interval (`day`, `month`, `year`).
    #[serde(default)]
    pub agg_date: Option<String>,
}

impl SearchParams {
    pub fn new(q: &str) -> Self {
        Self {
            q: q.to_string(),
            size: default_size(),
            from: 0,
            agg_field: None,
            agg_date: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermsAggregation {
    pub field: String,
    pub buckets: Vec<Bucket>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateAggregation {
    pub interval: DateInterval,
    pub buckets: Vec<Bucket>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<TermsAggregation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_histogram: Option<DateAggregation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub total: usize,
    pub hits: Vec<SearchHit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregations: Option<Aggregations>,
}

pub fn search(index: &InvertedIndex, params: &SearchParams) -> Result<SearchResponse, ApiError> {
    if params.size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("size exceeds {MAX_PAGE_SIZE}")));
    }
    let ast = parse_query(&params.q)?;
    let page = index.search_page(&ast, params.from, params.size);
    let mut aggs = Aggregations::default();
    if let Some(field) = &params.agg_field {
        let buckets = index.aggregate(&ast, &AggregateBy::Terms { field: field.clone() })?;
        aggs.terms = Some(TermsAggregation {
            field: field.clone(),
            buckets,
        });
    }
    if let Some(interval) = &params.agg_date {
        let interval: DateInterval = interval.parse()?;
        let buckets = index.aggregate(&ast, &AggregateBy::DateHistogram { interval })?;
        aggs.date_histogram = Some(DateAggregation { interval, buckets });
    }
    let any = aggs.terms.is_some() || aggs.date_histogram.is_some();
    Ok(SearchResponse {
        total: page.total,
        hits: page.hits,
        aggregations: any.then_some(aggs),
    })
}

// ---- flows ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCreated {
    pub flow_id: String,
}

// ---- projects ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectCreated {
    pub project_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextDocument {
    pub project_id: String,
    pub document: Document,
    pub mean_confidence: f64,
    pub entities: Vec<EntityView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub doc_id: String,
    pub annotator: String,
    pub annotations: Vec<AnnotationInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub project_id: String,
    pub snapshots: Vec<MetricsSnapshot>,
}

// ---- cohort ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRequest {
    #[serde(default)]
    pub events: Option<Vec<ClinicalEvent>>,
    /// CSV file name relative to the configured events directory.
    #[serde(default)]
    pub events_ref: Option<String>,
    pub rule: EligibilityRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientResult {
    pub patient_id: String,
    pub eligible: bool,
    pub index_date: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortResponse {
    pub results: Vec<PatientResult>,
}

pub fn cohort(events: &[ClinicalEvent], rule: &EligibilityRule) -> Result<CohortResponse, ApiError> {
    rule.validate()?;
    let results = evaluate_cohort(events, rule)?
        .into_iter()
        .map(|(patient_id, r)| PatientResult {
            patient_id,
            eligible: r.eligible,
            index_date: r.index_date,
        })
        .collect();
    Ok(CohortResponse { results })
}

fn safe_relative(name: &str) -> bool {
    let p = Path::new(name);
    !name.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)))
}

// ---- service state ----

/// Everything a running service needs: stores, engines and models.
pub struct ApiState {
    config: ServiceConfig,
    docs: Arc<RwLock<DocumentStore>>,
    index: RwLock<InvertedIndex>,
    flows: FlowEngine,
    annotation: AnnotationService,
    deid: DeidConfig,
}

fn io_err(what: &str, e: impl std::fmt::Display) -> ApiError {
    ApiError::new(500, "corrupt_store", format!("{what}: {e}"))
}

pub fn load_documents(config: &ServiceConfig) -> Result<DocumentStore, ApiError> {
    if config.documents.exists() {
        DocumentStore::load(&config.documents).map_err(|e| io_err("documents", e))
    } else {
        Ok(DocumentStore::new())
    }
}

/// Loads the saved index, or builds one from `docs` when none is saved.
pub fn load_index(config: &ServiceConfig, docs: &DocumentStore) -> Result<InvertedIndex, ApiError> {
    if config.index.join(crate::index::MANIFEST_FILE).exists() {
        return InvertedIndex::load(&config.index).map_err(|e| io_err("index", e));
    }
    let mut idx = InvertedIndex::new();
    for d in docs.iter() {
        idx.index_document(d);
    }
    Ok(idx)
}

pub fn load_bundle(config: &ServiceConfig, bundle_id: &str) -> Result<ModelBundle, ApiError> {
    let dir = config.bundles.join(bundle_id);
    if !safe_relative(bundle_id) || !dir.join(BUNDLE_MANIFEST).is_file() {
        return Err(ApiError::not_found(format!("unknown bundle {bundle_id}")));
    }
    ModelBundle::load(&dir).map_err(|e| io_err(&format!("bundle {bundle_id}"), e))
}

/// Every bundle directory under `config.bundles`, keyed by directory name.
pub fn load_bundles(config: &ServiceConfig) -> Result<Vec<(String, ModelBundle)>, ApiError> {
    if !config.bundles.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids: Vec<String> = fs::read_dir(&config.bundles)
        .map_err(|e| io_err("bundles", e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(BUNDLE_MANIFEST).is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.into_iter().map(|id| Ok((id.clone(), load_bundle(config, &id)?))).collect()
}

pub fn load_deid(config: &ServiceConfig) -> Result<DeidConfig, ApiError> {
    match &config.deid_config {
        Some(p) => DeidConfig::load(p).map_err(|e| io_err("deid config", e)),
        None => Ok(DeidConfig::default()),
    }
}

impl ApiState {
    pub fn open(config: ServiceConfig) -> Result<Self, ApiError> {
        Self::open_with_clock(config, Arc::new(SystemClock))
    }

    /// Loads the stores named by `config`, creating empty ones where absent.
    /// An index directory without a manifest is rebuilt from the documents.
    pub fn open_with_clock(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ApiError> {
        config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        let store = load_documents(&config)?;
        let index = load_index(&config, &store)?;
        let docs = Arc::new(RwLock::new(store));
        let flows = FlowEngine::with_persistence(clock.clone(), &config.flows).map_err(|e| io_err("flows", e))?;
        let annotation =
            AnnotationService::with_persistence(docs.clone(), clock, &config.projects).map_err(|e| io_err("projects", e))?;
        for (id, bundle) in load_bundles(&config)? {
            annotation.register_bundle(&id, bundle);
        }
        annotation.reload_projects().map_err(|e| io_err("projects", e))?;
        let deid = load_deid(&config)?;
        Ok(Self {
            config,
            docs,
            index: RwLock::new(index),
            flows,
            annotation,
            deid,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn documents(&self) -> &Arc<RwLock<DocumentStore>> {
        &self.docs
    }

    pub fn annotation(&self) -> &AnnotationService {
        &self.annotation
    }

    pub fn flows(&self) -> &FlowEngine {
        &self.flows
    }

    pub fn with_index<R>(&self, f: impl FnOnce(&InvertedIndex) -> R) -> R {
        f(&self.index.read().unwrap())
    }

    pub fn register_bundle(&self, bundle_id: &str, bundle: ModelBundle) {
        self.annotation.register_bundle(bundle_id, bundle);
    }

    pub fn analyze(&self, req: &AnalyzeRequest) -> Result<AnalyzeResponse, ApiError> {
        let id = req.bundle_id.as_deref().unwrap_or(&self.config.default_bundle);
        let bundle = self
            .annotation
            .bundle(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown bundle {id}")))?;
        Ok(analyze(&bundle, &req.text))
    }

    pub fn deid(&self, req: &DeidRequest) -> Result<DeidResponse, ApiError> {
        deid(&self.deid, &req.text)
    }

    pub fn search(&self, params: &SearchParams) -> Result<SearchResponse, ApiError> {
        search(&self.index.read().unwrap(), params)
    }

    pub fn create_flow(&self, graph: FlowGraph) -> Result<FlowCreated, ApiError> {
        let flow_id = self.flows.register_flow(graph)?;
        Ok(FlowCreated { flow_id })
    }

    /// Runs a flow, then reindexes and persists the document store and index.
    pub fn run_flow(&self, flow_id: &str) -> Result<FlowRunReport, ApiError> {
        let report = self.flows.run_flow(flow_id, &self.docs)?;
        let docs = self.docs.read().unwrap();
        let mut index = self.index.write().unwrap();
        // upserts may have replaced text under an existing id
        for d in docs.iter() {
            index.index_document(d);
        }
        docs.save(&self.config.documents).map_err(|e| io_err("documents", e))?;
        index.save(&self.config.index).map_err(|e| io_err("index", e))?;
        Ok(report)
    }

    pub fn flow_report(&self, flow_id: &str) -> Result<FlowRunReport, ApiError> {
        if self.flows.graph(flow_id).is_none() {
            return Err(ApiError::not_found(format!("unknown flow {flow_id}")));
        }
        self.flows
            .last_report(flow_id)
            .ok_or_else(|| ApiError::not_found(format!("flow {flow_id} has not run")))
    }

    pub fn create_project(&self, spec: ProjectSpec) -> Result<ProjectCreated, ApiError> {
        let project_id = self.annotation.create_project(spec)?;
        Ok(ProjectCreated { project_id })
    }

    pub fn next_document(&self, project_id: &str, annotator: &str) -> Result<NextDocument, ApiError> {
        let served = self.annotation.next_document(project_id, annotator)?;
        let bundle = self.annotation.serving_bundle(project_id)?;
        Ok(NextDocument {
            project_id: project_id.to_string(),
            entities: entity_views(&served.document.text, &served.annotations, &bundle),
            mean_confidence: served.mean_confidence,
            document: served.document,
        })
    }

    pub fn submit_annotations(&self, project_id: &str, req: SubmitRequest) -> Result<SubmitOutcome, ApiError> {
        Ok(self
            .annotation
            .submit_annotations(project_id, &req.doc_id, &req.annotator, req.annotations)?)
    }

    pub fn retrain(&self, project_id: &str) -> Result<MetricsSnapshot, ApiError> {
        Ok(self.annotation.retrain(project_id)?)
    }

    pub fn metrics(&self, project_id: &str) -> Result<MetricsResponse, ApiError> {
        Ok(MetricsResponse {
            project_id: project_id.to_string(),
            snapshots: self.annotation.metrics_timeline(project_id)?,
        })
    }

    pub fn cohort(&self, req: &CohortRequest) -> Result<CohortResponse, ApiError> {
        let events = match (&req.events, &req.events_ref) {
            (Some(ev), None) => ev.clone(),
            (None, Some(name)) => {
                if !safe_relative(name) {
                    return Err(ApiError::bad_request("events_ref must be a relative file name"));
                }
                let path = self.config.events.join(name);
                let f = fs::File::open(&path).map_err(|_| ApiError::not_found(format!("no events file {name}")))?;
                read_events(f)?
            }
            _ => return Err(ApiError::bad_request("give exactly one of events and events_ref")),
        };
        cohort(&events, &req.rule)
    }
}
