mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xdora_core::dataset::Task;
use xdora_core::ensemble::{DEFAULT_ALPHA, DEFAULT_K};
use xdora_core::eval::{DEFAULT_CONFIDENCE, DEFAULT_ITERATIONS};
use xdora_core::fusion::OptimizerKind;
use xdora_core::prompting::{PromptError, PromptMode, ServiceError, ENDPOINT_ENV};

const DEFAULT_ENDPOINT: &str = "http://127.0.0.1:8080/v1/classify";

#[derive(Debug, Parser, Serialize)]
#[command(name = "xdora", version, about = "Retrieval-augmented multimodal meme classification")]
struct Cli {
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Relabel a MIMOSA manifest into the BHM taxonomy.
    Remap(RemapArgs),
    /// Stratified train/valid/test split of an embedding file.
    Split(SplitArgs),
    /// Train the fusion network.
    Train(TrainArgs),
    /// Dump fused vectors of a labeled embedding file to an index file.
    EmbedFused(EmbedArgs),
    /// Build the retrieval index over the training split.
    IndexBuild(EmbedArgs),
    /// k-NN classification against an index.
    Knn(KnnArgs),
    /// Model-only predictions.
    Predict(PredictArgs),
    /// Model and retrieval predictions blended with weight alpha.
    Fuse(FuseArgs),
    /// Pick alpha on the validation split.
    GridAlpha(GridArgs),
    /// Render prompts for the vision-language model.
    PromptBuild(PromptArgs),
    /// Send prompts to the inference service.
    LvlmClassify(LvlmArgs),
    /// Macro precision/recall/F1 with bootstrap intervals.
    Evaluate(EvaluateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Remap(_) => "remap",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::EmbedFused(_) => "embed-fused",
            Command::IndexBuild(_) => "index-build",
            Command::Knn(_) => "knn",
            Command::Predict(_) => "predict",
            Command::Fuse(_) => "fuse",
            Command::GridAlpha(_) => "grid-alpha",
            Command::PromptBuild(_) => "prompt-build",
            Command::LvlmClassify(_) => "lvlm-classify",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct RemapArgs {
    /// JSON lines `{"id", "source_label"}`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of Non-aggression rows kept.
    #[arg(long, default_value_t = 1.0)]
    keep_non_hate: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Receives train.xdem, valid.xdem and test.xdem.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value = "adamw")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Plain cross-entropy instead of class-weighted.
    #[arg(long)]
    unweighted: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled embedding file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct RetrievalArgs {
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// `k` neighbors from every class instead of `k` overall.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    per_class: bool,
}

#[derive(Debug, Args, Serialize)]
struct KnnArgs {
    #[arg(long)]
    index: PathBuf,
    /// Model that embeds the queries.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Majority vote instead of similarity weights.
    #[arg(long)]
    uniform: bool,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FuseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[command(flatten)]
    retrieval: RetrievalArgs,
}

#[derive(Debug, Args, Serialize)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = xdora_core::ensemble::DEFAULT_GRID)]
    grid: Vec<f64>,
    #[command(flatten)]
    retrieval: RetrievalArgs,
}

#[derive(Debug, Args, Serialize)]
struct PromptArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, default_value = "rag")]
    mode: PromptMode,
    /// Captioned records to classify.
    #[arg(long)]
    queries: PathBuf,
    /// Captioned training records (few-shot and rag).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Embeds queries for rag exemplar retrieval.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Index over the training records (rag).
    #[arg(long)]
    index: Option<PathBuf>,
    /// Exemplars per class.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Directory holding `<id>.<image-ext>` for each query.
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[arg(long, default_value = "jpg")]
    image_ext: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct LvlmArgs {
    /// Output of prompt-build.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = ENDPOINT_ENV, default_value = DEFAULT_ENDPOINT)]
    endpoint: String,
    #[arg(long, default_value_t = 3)]
    retries: usize,
    #[arg(long, default_value_t = 250)]
    backoff_ms: u64,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Requests in flight.
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    /// JSON lines `{"id", "label", "gold"}`; `"label": null` is an abstention.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    task: Task,
    /// Report as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Report as a text table.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Bootstrap iterations; 0 skips the intervals.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    bootstrap: usize,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    confidence: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Bad flag combinations that clap cannot express.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let service = err
        .chain()
        .any(|e| e.is::<ServiceError>() || matches!(e.downcast_ref::<PromptError>(), Some(PromptError::Service(_))));
    if service {
        3
    } else if err.chain().any(|e| e.is::<UsageError>()) {
        1
    } else {
        2
    }
}

/// One JSON object per line on stderr.
fn log(event: &str, fields: serde_json::Value) {
    let mut obj = serde_json::Map::new();
    obj.insert("event".into(), event.into());
    if let serde_json::Value::Object(m) = fields {
        obj.extend(m);
    }
    eprintln!("{}", serde_json::Value::Object(obj));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    log("config", serde_json::json!({ "command": cli.command.name(), "config": &cli }));
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log("error", serde_json::json!({ "message": e.to_string() }));
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => {
            log("done", serde_json::json!({}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            log("error", serde_json::json!({ "message": format!("{e:#}"), "exit_code": code }));
            ExitCode::from(code)
        }
    }
}
