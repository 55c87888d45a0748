use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::extract::{extract_text, FieldMapping, RawRecord, RecordFormat};
use super::schedule::{Clock, Schedule, SystemClock};
use super::{Document, DocumentStore};
use crate::deid::{detect_phi, redact, DeidConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Source,
    Transform,
    Sink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNode {
    pub node_id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub config: serde_json::Map<String, Value>,
}

/// A directed acyclic graph of source, transform and sink nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub flow_id: String,
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounts {
    pub read: u64,
    pub written: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub node_id: String,
    pub locator: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRunReport {
    pub flow_id: String,
    pub started: DateTime<Utc>,
    pub ended: DateTime<Utc>,
    pub nodes: BTreeMap<String, NodeCounts>,
    pub errors: Vec<RecordError>,
}

impl FlowRunReport {
    /// Documents committed by sink nodes.
    pub fn stored(&self, graph: &FlowGraph) -> u64 {
        graph
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Sink)
            .filter_map(|n| self.nodes.get(&n.node_id))
            .map(|c| c.written)
            .sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlowError {
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("edge {from} -> {to} references an unknown node")]
    DanglingEdge { from: String, to: String },
    #[error("graph has no source node")]
    NoSource,
    #[error("graph has no sink node")]
    NoSink,
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("empty flow id")]
    EmptyFlowId,
    #[error("node `{node_id}`: {reason}")]
    InvalidConfig { node_id: String, reason: String },
    #[error("unknown flow `{0}`")]
    UnknownFlow(String),
    #[error("flow `{0}` is already running")]
    FlowBusy(String),
    #[error("source unavailable at {path}: {reason}")]
    SourceUnavailable { path: String, reason: String },
    #[error("could not persist flow: {0}")]
    Persist(String),
}

#[derive(Debug, Clone, Deserialize)]
struct SourceConfig {
    format: SourceFormat,
    path: PathBuf,
    #[serde(default)]
    has_header: bool,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SourceFormat {
    Jsonl,
    Csv,
    Txt,
    Pdf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum TransformConfig {
    Extract {
        mapping: FieldMapping,
    },
    Deid {
        #[serde(default)]
        config_path: Option<PathBuf>,
    },
    SetMetadata {
        key: String,
        value: String,
    },
}

#[derive(Debug)]
enum NodeOp {
    Source(SourceConfig),
    Extract(FieldMapping),
    Deid(Box<DeidConfig>),
    SetMetadata { key: String, value: String },
    Sink,
}

#[derive(Debug, Clone)]
enum Item {
    Raw(RawRecord),
    Doc(Document),
}

impl Item {
    fn locator(&self) -> String {
        match self {
            Item::Raw(r) => r.locator.clone(),
            Item::Doc(d) => d
                .metadata
                .get("locator")
                .cloned()
                .unwrap_or_else(|| format!("doc:{}", d.doc_id)),
        }
    }
}

#[derive(Debug)]
struct CompiledFlow {
    graph: FlowGraph,
    order: Vec<usize>,
    preds: Vec<Vec<usize>>,
    ops: Vec<NodeOp>,
}

impl FlowGraph {
    /// Checks structure and returns a topological order of node indices.
    pub fn validate(&self) -> Result<Vec<usize>, FlowError> {
        if self.flow_id.trim().is_empty() {
            return Err(FlowError::EmptyFlowId);
        }
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.node_id.as_str(), i).is_some() {
                return Err(FlowError::DuplicateNode(n.node_id.clone()));
            }
        }
        let mut succs = vec![Vec::new(); self.nodes.len()];
        let mut indegree = vec![0usize; self.nodes.len()];
        for (from, to) in &self.edges {
            let (Some(&a), Some(&b)) = (index.get(from.as_str()), index.get(to.as_str())) else {
                return Err(FlowError::DanglingEdge {
                    from: from.clone(),
                    to: to.clone(),
                });
            };
            succs[a].push(b);
            indegree[b] += 1;
        }
        // Kahn's algorithm, ties broken by declaration order
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &succs[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(FlowError::CyclicGraph);
        }
        if !self.nodes.iter().any(|n| n.kind == NodeKind::Source) {
            return Err(FlowError::NoSource);
        }
        if !self.nodes.iter().any(|n| n.kind == NodeKind::Sink) {
            return Err(FlowError::NoSink);
        }
        Ok(order)
    }

    fn compile(self) -> Result<CompiledFlow, FlowError> {
        let order = self.validate()?;
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id.as_str(), i))
            .collect();
        let mut preds = vec![Vec::new(); self.nodes.len()];
        for (from, to) in &self.edges {
            preds[index[to.as_str()]].push(index[from.as_str()]);
        }
        let ops = self.nodes.iter().map(compile_node).collect::<Result<Vec<_>, _>>()?;
        Ok(CompiledFlow {
            graph: self,
            order,
            preds,
            ops,
        })
    }
}

fn compile_node(node: &FlowNode) -> Result<NodeOp, FlowError> {
    let invalid = |reason: String| FlowError::InvalidConfig {
        node_id: node.node_id.clone(),
        reason,
    };
    let config = Value::Object(node.config.clone());
    match node.kind {
        NodeKind::Source => serde_json::from_value(config)
            .map(NodeOp::Source)
            .map_err(|e| invalid(e.to_string())),
        NodeKind::Sink => match node.config.get("target") {
            None => Ok(NodeOp::Sink),
            Some(Value::String(t)) if t == "store" => Ok(NodeOp::Sink),
            Some(other) => Err(invalid(format!("unsupported sink target {other}"))),
        },
        NodeKind::Transform => match serde_json::from_value(config).map_err(|e| invalid(e.to_string()))? {
            TransformConfig::Extract { mapping } => Ok(NodeOp::Extract(mapping)),
            TransformConfig::SetMetadata { key, value } => Ok(NodeOp::SetMetadata { key, value }),
            TransformConfig::Deid { config_path } => {
                let cfg = match config_path {
                    Some(p) => DeidConfig::load(&p).map_err(|e| invalid(e.to_string()))?,
                    None => DeidConfig::default(),
                };
                Ok(NodeOp::Deid(Box::new(cfg)))
            }
        },
    }
}

fn unavailable(path: &Path, reason: impl ToString) -> FlowError {
    FlowError::SourceUnavailable {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn read_source(cfg: &SourceConfig) -> Result<Vec<RawRecord>, FlowError> {
    let path = &cfg.path;
    match cfg.format {
        SourceFormat::Jsonl => {
            let content = fs::read(path).map_err(|e| unavailable(path, e))?;
            Ok(content
                .split(|&b| b == b'\n')
                .enumerate()
                .filter(|(_, line)| !line.iter().all(u8::is_ascii_whitespace))
                .map(|(i, line)| {
                    let line = line.strip_suffix(b"\r").unwrap_or(line);
                    RawRecord::new(line.to_vec(), RecordFormat::JsonlRow, format!("{}:{}", path.display(), i + 1))
                })
                .collect())
        }
        SourceFormat::Csv => {
            let content = fs::read(path).map_err(|e| unavailable(path, e))?;
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .from_reader(content.as_slice());
            let mut out = Vec::new();
            let mut columns = None;
            let mut record = csv::ByteRecord::new();
            loop {
                let start = reader.position().byte() as usize;
                let line = reader.position().line();
                match reader.read_byte_record(&mut record) {
                    Ok(false) => break,
                    Ok(true) => {}
                    Err(e) => return Err(unavailable(path, e)),
                }
                let end = reader.position().byte() as usize;
                if cfg.has_header && columns.is_none() {
                    columns = Some(Arc::new(
                        record.iter().map(|f| String::from_utf8_lossy(f).into_owned()).collect(),
                    ));
                    continue;
                }
                let raw_bytes = content[start..end].trim_ascii_end().to_vec();
                let mut raw = RawRecord::new(raw_bytes, RecordFormat::CsvRow, format!("{}:{}", path.display(), line));
                raw.columns = columns.clone();
                out.push(raw);
            }
            Ok(out)
        }
        SourceFormat::Txt | SourceFormat::Pdf => {
            let (ext, format) = match cfg.format {
                SourceFormat::Txt => ("txt", RecordFormat::Txt),
                _ => ("pdf", RecordFormat::Pdf),
            };
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| unavailable(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
                .collect();
            files.sort();
            files
                .into_iter()
                .map(|f| {
                    let payload = fs::read(&f).map_err(|e| unavailable(&f, e))?;
                    Ok(RawRecord::new(payload, format, f.display().to_string()))
                })
                .collect()
        }
    }
}

fn apply(op: &NodeOp, item: Item, flow_id: &str) -> Result<Item, String> {
    match (op, item) {
        (NodeOp::Source(_) | NodeOp::Sink, item) => Ok(item),
        (NodeOp::Extract(mapping), Item::Raw(raw)) => {
            let mut doc = extract_text(&raw, mapping).map_err(|e| e.to_string())?;
            doc.source = flow_id.to_string();
            Ok(Item::Doc(doc))
        }
        (NodeOp::Extract(_), doc @ Item::Doc(_)) => Ok(doc),
        (NodeOp::Deid(cfg), Item::Doc(mut doc)) => {
            let spans = detect_phi(&doc.text, cfg);
            doc.text = redact(&doc.text, &spans, cfg).map_err(|e| e.to_string())?;
            doc.metadata.insert("deidentified".into(), "true".into());
            Ok(Item::Doc(doc))
        }
        (NodeOp::SetMetadata { key, value }, Item::Doc(mut doc)) => {
            doc.metadata.insert(key.clone(), value.clone());
            Ok(Item::Doc(doc))
        }
        (NodeOp::Deid(_) | NodeOp::SetMetadata { .. }, Item::Raw(_)) => {
            Err("transform requires an extracted document".into())
        }
    }
}

/// Registry and executor for flow graphs.
pub struct FlowEngine {
    flows: RwLock<BTreeMap<String, Arc<CompiledFlow>>>,
    running: Mutex<BTreeSet<String>>,
    reports: Mutex<BTreeMap<String, FlowRunReport>>,
    clock: Arc<dyn Clock>,
    persist_dir: Option<PathBuf>,
}

impl Default for FlowEngine {
    fn default() -> Self {
        Self::new(Arc::new(SystemClock))
    }
}

struct RunGuard<'a> {
    running: &'a Mutex<BTreeSet<String>>,
    flow_id: String,
}

impl Drop for RunGuard<'_> {
    fn drop(&mut self) {
        self.running.lock().unwrap().remove(&self.flow_id);
    }
}

impl FlowEngine {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            flows: RwLock::new(BTreeMap::new()),
            running: Mutex::new(BTreeSet::new()),
            reports: Mutex::new(BTreeMap::new()),
            clock,
            persist_dir: None,
        }
    }

    /// Persists registered flows as `<dir>/<flow_id>.json` and loads any
    /// already there.
    pub fn with_persistence(clock: Arc<dyn Clock>, dir: &Path) -> Result<Self, FlowError> {
        let mut engine = Self::new(clock);
        fs::create_dir_all(dir).map_err(|e| FlowError::Persist(e.to_string()))?;
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| FlowError::Persist(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let text = fs::read_to_string(&f).map_err(|e| FlowError::Persist(e.to_string()))?;
            let graph: FlowGraph = serde_json::from_str(&text).map_err(|e| FlowError::Persist(e.to_string()))?;
            engine.register_flow(graph)?;
        }
        engine.persist_dir = Some(dir.to_path_buf());
        Ok(engine)
    }

    pub fn register_flow(&self, graph: FlowGraph) -> Result<String, FlowError> {
        let compiled = graph.compile()?;
        let flow_id = compiled.graph.flow_id.clone();
        if self.running.lock().unwrap().contains(&flow_id) {
            return Err(FlowError::FlowBusy(flow_id));
        }
        if let Some(dir) = &self.persist_dir {
            let json = serde_json::to_string_pretty(&compiled.graph).map_err(|e| FlowError::Persist(e.to_string()))?;
            fs::write(dir.join(format!("{flow_id}.json")), json).map_err(|e| FlowError::Persist(e.to_string()))?;
        }
        self.flows.write().unwrap().insert(flow_id.clone(), Arc::new(compiled));
        Ok(flow_id)
    }

    pub fn graph(&self, flow_id: &str) -> Option<FlowGraph> {
        self.flows.read().unwrap().get(flow_id).map(|f| f.graph.clone())
    }

    pub fn flow_ids(&self) -> Vec<String> {
        self.flows.read().unwrap().keys().cloned().collect()
    }

    pub fn last_report(&self, flow_id: &str) -> Option<FlowRunReport> {
        self.reports.lock().unwrap().get(flow_id).cloned()
    }

    /// Runs the flow once. Records that fail anywhere are routed into the
    /// report; documents reaching a sink are upserted into `store` in one
    /// write at the end of the run.
    pub fn run_flow(&self, flow_id: &str, store: &RwLock<DocumentStore>) -> Result<FlowRunReport, FlowError> {
        let flow = self
            .flows
            .read()
            .unwrap()
            .get(flow_id)
            .cloned()
            .ok_or_else(|| FlowError::UnknownFlow(flow_id.to_string()))?;
        if !self.running.lock().unwrap().insert(flow_id.to_string()) {
            return Err(FlowError::FlowBusy(flow_id.to_string()));
        }
        let _guard = RunGuard {
            running: &self.running,
            flow_id: flow_id.to_string(),
        };

        let started = self.clock.now();
        // read every source first: an unreadable source fails the whole run
        let mut source_records: HashMap<usize, Vec<RawRecord>> = HashMap::new();
        for (i, op) in flow.ops.iter().enumerate() {
            if let NodeOp::Source(cfg) = op {
                source_records.insert(i, read_source(cfg)?);
            }
        }

        let n = flow.graph.nodes.len();
        let mut outputs: Vec<Vec<Item>> = vec![Vec::new(); n];
        let mut counts = vec![NodeCounts::default(); n];
        let mut errors = Vec::new();
        let mut staged: Vec<Document> = Vec::new();

        for &i in &flow.order {
            let node = &flow.graph.nodes[i];
            let mut inputs: Vec<Item> = flow.preds[i].iter().flat_map(|&p| outputs[p].iter().cloned()).collect();
            if let Some(records) = source_records.remove(&i) {
                inputs.extend(records.into_iter().map(Item::Raw));
            }
            let op = &flow.ops[i];
            let mut out = Vec::with_capacity(inputs.len());
            for item in inputs {
                counts[i].read += 1;
                let locator = item.locator();
                let result = match (op, apply(op, item, flow_id)) {
                    (NodeOp::Sink, Ok(Item::Doc(doc))) => {
                        staged.push(doc.clone());
                        Ok(Item::Doc(doc))
                    }
                    (NodeOp::Sink, Ok(Item::Raw(_))) => Err("record reached sink without extraction".to_string()),
                    (_, r) => r,
                };
                match result {
                    Ok(item) => {
                        counts[i].written += 1;
                        out.push(item);
                    }
                    Err(reason) => {
                        counts[i].failed += 1;
                        errors.push(RecordError {
                            node_id: node.node_id.clone(),
                            locator,
                            reason,
                        });
                    }
                }
            }
            outputs[i] = out;
        }

        {
            let mut store = store.write().unwrap();
            for doc in staged {
                store.upsert(doc);
            }
        }

        let report = FlowRunReport {
            flow_id: flow_id.to_string(),
            started,
            ended: self.clock.now(),
            nodes: flow
                .graph
                .nodes
                .iter()
                .zip(counts)
                .map(|(node, c)| (node.node_id.clone(), c))
                .collect(),
            errors,
        };
        self.reports.lock().unwrap().insert(flow_id.to_string(), report.clone());
        Ok(report)
    }

    /// Runs according to `schedule`, sleeping on the engine clock between runs.
    pub fn run_scheduled(
        &self,
        flow_id: &str,
        schedule: Schedule,
        store: &RwLock<DocumentStore>,
    ) -> Result<Vec<FlowRunReport>, FlowError> {
        match schedule {
            Schedule::Once => Ok(vec![self.run_flow(flow_id, store)?]),
            Schedule::Every { interval, runs } => {
                let mut reports = Vec::with_capacity(runs);
                for k in 0..runs {
                    if k > 0 {
                        self.clock.sleep(interval);
                    }
                    reports.push(self.run_flow(flow_id, store)?);
                }
                Ok(reports)
            }
        }
    }

    #[cfg(test)]
    fn mark_running(&self, flow_id: &str) {
        self.running.lock().unwrap().insert(flow_id.to_string());
    }
}
