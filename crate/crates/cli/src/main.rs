use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clap::error::ErrorKind;

mod commands;

#[derive(Parser)]
#[command(name = "medtext", version, about = "Clinical free-text analytics", arg_required_else_help = true)]
struct Cli {
    /// Service configuration (TOML). Defaults to stores under ./data.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for randomized training steps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path, for subcommands that write one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run ingestion flows.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Concept database tools.
    #[command(subcommand)]
    Cdb(CdbCmd),
    /// Word embedding tools.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Train linking and meta-annotation models.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Annotation service and export.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Search the document index; prints the same JSON as the HTTP endpoint.
    Search(SearchArgs),
    /// De-identify text.
    Deid(TextInput),
    /// Annotate text with a model bundle.
    Analyze(AnalyzeArgs),
    /// Cohort eligibility.
    #[command(subcommand)]
    Cohort(CohortCmd),
    /// Evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Index maintenance.
    #[command(subcommand)]
    Index(IndexCmd),
}

#[derive(Subcommand)]
enum IngestCmd {
    /// Register a flow graph (JSON) and run it once against the document store.
    Run {
        #[arg(long)]
        flow: PathBuf,
    },
}

#[derive(Subcommand)]
enum CdbCmd {
    /// Build a concept database from a TSV ontology (cui, name, preferred, [type]).
    Build {
        #[arg(long)]
        ontology: PathBuf,
    },
}

#[derive(Subcommand)]
enum VocabCmd {
    /// Train word embeddings. Uses the document store when no corpus is given.
    Train {
        /// Plain text, one document per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 5)]
        negatives: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
    },
}

#[derive(Args)]
struct BundleSource {
    /// Start from an existing bundle directory.
    #[arg(long, conflicts_with_all = ["cdb", "vocab"])]
    bundle: Option<PathBuf>,
    /// Start from a concept database file (with --vocab).
    #[arg(long, requires = "vocab")]
    cdb: Option<PathBuf>,
    #[arg(long, requires = "cdb")]
    vocab: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Learn concept context vectors from unambiguous mentions.
    SelfSupervised {
        #[command(flatten)]
        source: BundleSource,
        /// Plain text, one document per line; defaults to the document store.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Apply human verdicts (JSON lines of {text, start, end, cui, correct}).
    Supervised {
        #[command(flatten)]
        source: BundleSource,
        #[arg(long)]
        examples: PathBuf,
    },
    /// Train a meta-annotation classifier (JSON lines of {text, start, end, label}).
    Meta {
        #[command(flatten)]
        source: BundleSource,
        #[arg(long)]
        task: String,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long, default_value_t = 7)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum AnnotateCmd {
    /// Serve the HTTP API until interrupted.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Annotate every stored document and write the mentions.
    Export {
        #[arg(long)]
        bundle_id: Option<String>,
        #[arg(long, default_value = "jsonl")]
        format: String,
    },
}

#[derive(Args)]
struct SearchArgs {
    query: String,
    #[arg(long, default_value_t = 10)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    from: usize,
    #[arg(long)]
    agg_field: Option<String>,
    #[arg(long)]
    agg_date: Option<String>,
}

#[derive(Args)]
struct TextInput {
    /// Text to process; read from --input or stdin when absent.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: TextInput,
    #[arg(long)]
    bundle_id: Option<String>,
}

#[derive(Subcommand)]
enum CohortCmd {
    /// Evaluate a rule over an events CSV and write per-patient results as CSV.
    Eval {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        rule: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Score predicted mentions against gold (JSON lines of {doc_id, start, end, cui}).
    Ner {
        #[arg(long)]
        gold: PathBuf,
        /// Predictions file; when absent the bundle annotates the stored documents.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred")]
        bundle_id: Option<String>,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Rebuild the index from the document store.
    Build,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<medtext::api::ApiError>() {
                Some(api) => eprintln!("{}", String::from_utf8_lossy(&medtext::api::to_json(api))),
                None => eprintln!("error: {}", describe(&e)),
            }
            ExitCode::from(2)
        }
    }
}

/// The error chain joined by `: `, skipping causes a message already shows.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}
