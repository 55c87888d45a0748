use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use medtext::annotate::SUPERVISED_LR;
use medtext::api::{self, ServiceConfig};
use medtext::cohort::{evaluate_cohort, read_events, write_results, EligibilityRule};
use medtext::ingest::{export_annotations, AnnotationStore, DocumentStore, ExportFormat, FlowGraph};
use medtext::nerl::{
    build_cdb, evaluate_ner, read_ontology, train_meta, train_self_supervised, train_supervised, train_word_embeddings,
    ConceptDatabase, GoldMention, MetaConfig, MetaExample, SupervisedExample, Vocab, Word2VecConfig,
};
use medtext::{InvertedIndex, ModelBundle};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::{AnnotateCmd, BundleSource, CdbCmd, Cli, CohortCmd, Command, EvalCmd, IndexCmd, IngestCmd, TextInput, TrainCmd, VocabCmd};

struct Ctx {
    config: ServiceConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
    }

    /// JSON payloads go to `--out` when given, else stdout.
    fn emit(&self, bytes: Vec<u8>) -> Result<()> {
        match &self.out {
            Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
            None => {
                let mut stdout = io::stdout().lock();
                stdout.write_all(&bytes)?;
                stdout.write_all(b"\n")?;
                Ok(())
            }
        }
    }

    /// Short summaries always go to stdout.
    fn summary(&self, value: serde_json::Value) -> Result<()> {
        println!("{value}");
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    let ctx = Ctx {
        config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Ingest(IngestCmd::Run { flow }) => ingest_run(&ctx, &flow),
        Command::Cdb(CdbCmd::Build { ontology }) => cdb_build(&ctx, &ontology),
        Command::Vocab(VocabCmd::Train {
            corpus,
            dim,
            window,
            negatives,
            epochs,
            min_count,
        }) => {
            let cfg = Word2VecConfig {
                dim,
                window,
                negatives,
                epochs,
                min_count,
                seed: ctx.seed.unwrap_or(Word2VecConfig::default().seed),
            };
            vocab_train(&ctx, corpus.as_deref(), &cfg)
        }
        Command::Train(cmd) => train(&ctx, cmd),
        Command::Annotate(AnnotateCmd::Serve { listen }) => serve(ctx, listen),
        Command::Annotate(AnnotateCmd::Export { bundle_id, format }) => export(&ctx, bundle_id.as_deref(), &format),
        Command::Search(args) => {
            let docs = api::load_documents(&ctx.config)?;
            let index = api::load_index(&ctx.config, &docs)?;
            let params = api::SearchParams {
                q: args.query,
                size: args.size,
                from: args.from,
                agg_field: args.agg_field,
                agg_date: args.agg_date,
            };
            ctx.emit(api::to_json(&api::search(&index, &params)?))
        }
        Command::Deid(input) => {
            let text = read_text(&input)?;
            let cfg = api::load_deid(&ctx.config)?;
            ctx.emit(api::to_json(&api::deid(&cfg, &text)?))
        }
        Command::Analyze(args) => {
            let text = read_text(&args.input)?;
            let id = args.bundle_id.as_deref().unwrap_or(&ctx.config.default_bundle);
            let bundle = api::load_bundle(&ctx.config, id)?;
            ctx.emit(api::to_json(&api::analyze(&bundle, &text)))
        }
        Command::Cohort(CohortCmd::Eval { events, rule }) => cohort_eval(&ctx, &events, &rule),
        Command::Eval(EvalCmd::Ner { gold, pred, bundle_id }) => eval_ner(&ctx, &gold, pred.as_deref(), bundle_id.as_deref()),
        Command::Index(IndexCmd::Build) => {
            let docs = api::load_documents(&ctx.config)?;
            let mut index = InvertedIndex::new();
            for d in docs.iter() {
                index.index_document(d);
            }
            index.save(&ctx.config.index)?;
            ctx.summary(json!({"documents": index.doc_count(), "terms": index.terms().count()}))
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn read_text(input: &TextInput) -> Result<String> {
    if let Some(t) = &input.text {
        return Ok(t.clone());
    }
    let mut s = String::new();
    match &input.input {
        Some(p) => {
            open(p)?.read_to_string(&mut s)?;
        }
        None => {
            io::stdin().read_to_string(&mut s)?;
        }
    }
    Ok(s)
}

/// Corpus lines from a file, or the texts in the document store.
fn corpus(ctx: &Ctx, path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        Some(p) => Ok(BufReader::new(open(p)?).lines().collect::<io::Result<_>>()?),
        None => {
            let docs = api::load_documents(&ctx.config)?;
            if docs.is_empty() {
                bail!("no corpus given and the document store is empty");
            }
            Ok(docs.iter().map(|d| d.text.clone()).collect())
        }
    }
}

fn ingest_run(ctx: &Ctx, flow: &Path) -> Result<()> {
    let graph: FlowGraph = serde_json::from_reader(BufReader::new(open(flow)?)).context("flow graph")?;
    let state = api::ApiState::open(ctx.config.clone())?;
    let id = state.create_flow(graph)?.flow_id;
    let report = state.run_flow(&id)?;
    ctx.emit(api::to_json(&report))
}

fn cdb_build(ctx: &Ctx, ontology: &Path) -> Result<()> {
    let rows = read_ontology(BufReader::new(open(ontology)?))?;
    let cdb = build_cdb(&rows)?;
    cdb.save(ctx.out()?)?;
    ctx.summary(json!({"concepts": cdb.len(), "names": cdb.name_index().len()}))
}

fn vocab_train(ctx: &Ctx, corpus_path: Option<&Path>, cfg: &Word2VecConfig) -> Result<()> {
    let texts = corpus(ctx, corpus_path)?;
    let vocab = train_word_embeddings(texts.iter().map(String::as_str), cfg)?;
    vocab.save(ctx.out()?)?;
    ctx.summary(json!({"words": vocab.len(), "dim": vocab.dim()}))
}

fn load_source(ctx: &Ctx, source: &BundleSource) -> Result<ModelBundle> {
    match (&source.bundle, &source.cdb, &source.vocab) {
        (Some(dir), _, _) => Ok(ModelBundle::load(dir)?),
        (None, Some(cdb), Some(vocab)) => Ok(ModelBundle::new(ConceptDatabase::load(cdb)?, Vocab::load(vocab)?)),
        _ => Ok(api::load_bundle(&ctx.config, &ctx.config.default_bundle)?),
    }
}

#[derive(Deserialize)]
struct MetaRow {
    text: String,
    start: usize,
    end: usize,
    label: String,
}

fn train(ctx: &Ctx, cmd: TrainCmd) -> Result<()> {
    match cmd {
        TrainCmd::SelfSupervised { source, corpus: path } => {
            let out = ctx.out()?;
            let mut bundle = load_source(ctx, &source)?;
            let texts = corpus(ctx, path.as_deref())?;
            let link = bundle.config.link.clone();
            let updates = train_self_supervised(texts.iter().map(String::as_str), &mut bundle.cdb, &bundle.vocab, &link);
            bundle.save(out)?;
            ctx.summary(json!({"updates": updates}))
        }
        TrainCmd::Supervised { source, examples } => {
            let out = ctx.out()?;
            let mut bundle = load_source(ctx, &source)?;
            let examples: Vec<SupervisedExample> = read_jsonl(&examples)?;
            let link = bundle.config.link.clone();
            let report = train_supervised(&examples, &mut bundle.cdb, &bundle.vocab, SUPERVISED_LR, &link)?;
            bundle.save(out)?;
            ctx.summary(serde_json::to_value(report)?)
        }
        TrainCmd::Meta { source, task, examples, k } => {
            let out = ctx.out()?;
            let mut bundle = load_source(ctx, &source)?;
            let rows: Vec<MetaRow> = read_jsonl(&examples)?;
            let examples = rows
                .iter()
                .map(|r| MetaExample::from_text(&r.text, r.start, r.end, &r.label))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = MetaConfig {
                k,
                seed: ctx.seed.unwrap_or(MetaConfig::default().seed),
                ..MetaConfig::default()
            };
            let model = train_meta(&task, &examples, &bundle.vocab, &cfg)?;
            let labels = model.labels.clone();
            bundle.set_meta(model);
            bundle.save(out)?;
            ctx.summary(json!({"task": task, "labels": labels, "examples": examples.len()}))
        }
    }
}

fn serve(ctx: Ctx, listen: Option<String>) -> Result<()> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .try_init();
    let mut config = ctx.config;
    if let Some(l) = listen {
        config.listen = l;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(medtext_server::serve(config)).map_err(|e| anyhow!(e))
}

fn export(ctx: &Ctx, bundle_id: Option<&str>, format: &str) -> Result<()> {
    let format: ExportFormat = format.parse().map_err(|e: String| anyhow!(e))?;
    let out = ctx.out()?;
    let docs = api::load_documents(&ctx.config)?;
    let bundle = api::load_bundle(&ctx.config, bundle_id.unwrap_or(&ctx.config.default_bundle))?;
    let store = annotate_store(&docs, &bundle);
    let n = export_annotations(&store, out, format)?;
    ctx.summary(json!({"documents": docs.len(), "mentions": n}))
}

fn annotate_store(docs: &DocumentStore, bundle: &ModelBundle) -> AnnotationStore {
    let mut store = AnnotationStore::new();
    for d in docs.iter() {
        store.set(&d.doc_id, bundle.annotate_text(&d.text));
    }
    store
}

fn cohort_eval(ctx: &Ctx, events: &Path, rule: &Path) -> Result<()> {
    let events = read_events(open(events)?)?;
    let rule: EligibilityRule = serde_json::from_reader(BufReader::new(open(rule)?)).context("rule")?;
    rule.validate()?;
    let results = evaluate_cohort(&events, &rule)?;
    match &ctx.out {
        Some(p) => write_results(File::create(p).with_context(|| format!("creating {}", p.display()))?, &results)?,
        None => write_results(io::stdout().lock(), &results)?,
    }
    Ok(())
}

fn eval_ner(ctx: &Ctx, gold: &Path, pred: Option<&Path>, bundle_id: Option<&str>) -> Result<()> {
    let gold: Vec<GoldMention> = read_jsonl(gold)?;
    let predicted: Vec<GoldMention> = match pred {
        Some(p) => read_jsonl(p)?,
        None => {
            let docs = api::load_documents(&ctx.config)?;
            let bundle = api::load_bundle(&ctx.config, bundle_id.unwrap_or(&ctx.config.default_bundle))?;
            docs.iter()
                .flat_map(|d| {
                    bundle.annotate_text(&d.text).into_iter().map(|m| GoldMention {
                        doc_id: d.doc_id.clone(),
                        start: m.start,
                        end: m.end,
                        cui: m.cui,
                    })
                })
                .collect()
        }
    };
    ctx.emit(api::to_json(&evaluate_ner(&gold, &predicted)))
}
