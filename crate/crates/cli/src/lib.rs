//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 on a
//! runtime failure, 2 on a usage error. Failures print a single
//! `error[<kind>]: <message>` line on stderr.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use razewright::collab::{self, CollabError, RoleSpec, ScenarioKind};
use razewright::corpus::{self, Chunk, CleanRules, CorpusError};
use razewright::dataset::{self, DatasetError, GenerationConfig};
use razewright::exam::{self, ExamError, ExamReport, Metric, VotingConfig};
use razewright::index::{self, ExtractionConfig, Index, IndexError};
use razewright::lora::{self, FinetuneConfig, LoraError};
use razewright::metrics::{self, BleuConfig, MetricsError, TokenizerMode};
use razewright::providers::{
    ChatProvider, ChatRequest, EmbedProvider, HashEmbedder, HttpChat, HttpEmbedder, Limited, ProviderError,
    RetryPolicy, Retrying, ScriptedChat,
};
use razewright::retrieve::{self, Mode, Query, RagRetriever, RetrieveConfig, RetrieveError, Retriever};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{AppConfig, ConfigError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    /// A provider failure stopped a batch job after partial output was saved.
    #[error("{0}")]
    Aborted(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Exam(#[from] ExamError),
    #[error(transparent)]
    Collab(#[from] CollabError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Lora(#[from] LoraError),
}

impl CliError {
    /// Stable tag for the `error[...]` line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Input(_) => "input",
            CliError::Provider(_)
            | CliError::Aborted(_)
            | CliError::Index(IndexError::Provider(_))
            | CliError::Retrieve(RetrieveError::Provider(_))
            | CliError::Collab(CollabError::Provider { .. }) => "provider",
            CliError::Corpus(_) => "corpus",
            CliError::Index(_) => "index",
            CliError::Retrieve(_) => "retrieve",
            CliError::Dataset(_) => "dataset",
            CliError::Exam(_) => "exam",
            CliError::Collab(_) => "collab",
            CliError::Metrics(_) => "metrics",
            CliError::Lora(_) => "lora",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "razewright", version, about = "Retrieval-augmented generation toolkit for steel structure demolition engineering")]
pub struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Use a scripted chat model from this JSONL file and a local hashing embedder; no network
    #[arg(long, global = true, value_name = "SCRIPT")]
    pub mock: Option<PathBuf>,
    /// Print machine-readable JSON instead of text
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean and chunk a corpus directory into a chunks file
    Ingest(IngestArgs),
    /// Embed chunks and extract the knowledge graph into an index directory
    Index(IndexArgs),
    /// Answer one question with retrieved context
    Query(QueryArgs),
    /// Instruction dataset generation and splitting
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Objective-question exams
    #[command(subcommand)]
    Exam(ExamCommand),
    /// BLEU and ROUGE over candidate/reference pairs
    Evaluate(EvaluateArgs),
    /// Run the five-role demolition proposal pipeline
    Propose(ProposeArgs),
    /// Answer one of the fixed expert scenarios
    Scenario(ScenarioArgs),
    /// Fine-tune configuration files
    #[command(subcommand, name = "lora-config")]
    LoraConfig(LoraCommand),
    /// Print the effective configuration
    Config,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus directory [config: paths.corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output chunks file (JSONL)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub chunk_overlap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Chunks file written by `ingest`
    #[arg(long)]
    pub chunks: PathBuf,
    /// Index directory [config: paths.index]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip knowledge-graph extraction
    #[arg(long)]
    pub no_graph: bool,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// Index directory [config: paths.index]
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// naive, local, global or hybrid [config: retrieval.mode]
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Question text
    pub text: String,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Answer template with {context} and {query}
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Write query, context, prompt and answer as JSON
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Generate instruction entries from chunks
    Gen(DatasetGenArgs),
    /// Deduplicate and split a dataset into train and test files
    Split(DatasetSplitArgs),
}

#[derive(Debug, Args)]
pub struct DatasetGenArgs {
    #[arg(long)]
    pub chunks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rejected replies (JSONL); defaults to <out>.rejects.jsonl
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub per_chunk: usize,
    /// Generation prompt with a {text} placeholder
    #[arg(long)]
    pub prompt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetSplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = dataset::DEFAULT_SPLIT_RATIO)]
    pub ratio: f64,
    #[arg(long, default_value_t = dataset::DEFAULT_SPLIT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum ExamCommand {
    /// Vote on every question in a bank and report accuracy
    Run(ExamRunArgs),
    /// Tabulate saved reports: models as rows, configurations as columns
    Compare(ExamCompareArgs),
}

#[derive(Debug, Args)]
pub struct ExamRunArgs {
    /// Question bank (JSONL)
    #[arg(long)]
    pub bank: PathBuf,
    /// Add retrieved context from this index
    #[arg(long)]
    pub rag: bool,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Write the full report (with every vote) as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExamCompareArgs {
    /// MODEL:CONFIG=REPORT.json, one per cell
    #[arg(required = true, value_name = "MODEL:CONFIG=FILE")]
    pub reports: Vec<String>,
    /// mean (mean of per-kind accuracies) or micro (all questions pooled)
    #[arg(long, default_value = "mean")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSONL of {"candidate": ..., "reference": ...}
    #[arg(long, conflicts_with_all = ["candidates", "references"])]
    pub pairs: Option<PathBuf>,
    /// One candidate per line
    #[arg(long, requires = "references")]
    pub candidates: Option<PathBuf>,
    /// One reference per line, aligned with --candidates
    #[arg(long, requires = "candidates")]
    pub references: Option<PathBuf>,
    /// word or char
    #[arg(long, default_value = "word")]
    pub tokenizer: TokenizerMode,
    /// Maximum BLEU n-gram order
    #[arg(long, default_value_t = 4)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    /// Structure precondition text file
    #[arg(long)]
    pub precondition: PathBuf,
    /// Retrieve context for roles that use it
    #[arg(long)]
    pub rag: bool,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Directory of <role>.txt template overrides [config: paths.templates]
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Write the final proposal here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the full bundle (prompts, replies, context) as JSON
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// safety_rules, scheme_outline or custom
    #[arg(long)]
    pub kind: ScenarioKind,
    /// Task text for the custom scenario
    #[arg(long, default_value = "")]
    pub body: String,
    /// Structure precondition appended to the prompt
    #[arg(long)]
    pub precondition: Option<PathBuf>,
    #[arg(long)]
    pub rag: bool,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Print the prompt without calling the model
    #[arg(long)]
    pub prompt_only: bool,
}

#[derive(Debug, Subcommand)]
pub enum LoraCommand {
    /// Write the default fine-tune configuration
    Emit {
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a configuration file
    Check { file: PathBuf },
    /// Trainable parameters of a full update versus a low-rank adapter
    Savings {
        #[arg(long)]
        d_in: u64,
        #[arg(long)]
        d_out: u64,
        #[arg(long)]
        rank: u64,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

/// Providers plus the effective configuration for one invocation.
struct Env {
    cfg: AppConfig,
    chat: Box<dyn ChatProvider>,
    embed: Box<dyn EmbedProvider>,
    workers: usize,
    json: bool,
}

impl Env {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = AppConfig::default();
        if let Some(path) = &cli.config {
            cfg.apply_text(&read(path)?)?;
        }
        for pair in &cli.set {
            cfg.apply_pair(pair)?;
        }
        Env::with_config(cfg, cli)
    }

    fn with_config(cfg: AppConfig, cli: &Cli) -> Result<Self> {
        let (chat, embed, workers): (Box<dyn ChatProvider>, Box<dyn EmbedProvider>, usize) = match &cli.mock {
            Some(script) => (
                Box::new(ScriptedChat::from_file(script)?),
                Box::new(HashEmbedder::default()),
                1,
            ),
            None => {
                let policy = RetryPolicy {
                    max_attempts: cfg.retries + 1,
                    ..RetryPolicy::default()
                };
                (
                    Box::new(Limited::new(Retrying::new(HttpChat::new(cfg.chat.provider_config()), policy), cfg.concurrency)),
                    Box::new(Retrying::new(HttpEmbedder::new(cfg.embed.provider_config()), policy)),
                    cfg.concurrency,
                )
            }
        };
        Ok(Env {
            cfg,
            chat,
            embed,
            workers,
            json: cli.json,
        })
    }

    fn apply_retrieval(&mut self, r: &RetrievalArgs) -> Result<()> {
        if let Some(p) = &r.index {
            self.cfg.index_dir = p.clone();
        }
        if let Some(m) = r.mode {
            self.cfg.mode = m;
        }
        if let Some(k) = r.top_k {
            self.cfg.top_k = k;
        }
        Ok(self.cfg.validate()?)
    }

    fn load_index(&self) -> Result<Index> {
        Ok(index::load_index(&self.cfg.index_dir)?)
    }

    fn retriever<'a>(&'a self, index: &'a Index) -> RagRetriever<'a> {
        let mut r = RagRetriever::new(index, &*self.embed, &*self.chat);
        r.mode = self.cfg.mode;
        r.top_k = self.cfg.top_k;
        r.config = self.retrieve_config();
        r
    }

    fn retrieve_config(&self) -> RetrieveConfig {
        RetrieveConfig {
            model: self.cfg.chat.model.clone(),
            char_budget: self.cfg.context_budget,
            ..RetrieveConfig::default()
        }
    }

    fn chat_request(&self, prompt: impl Into<String>) -> ChatRequest {
        ChatRequest::user(&self.cfg.chat.model, prompt).with_temperature(self.cfg.chat_temperature)
    }
}

/// Parses `argv` (including the program name) and runs the command,
/// writing results to `out` and diagnostics to `err`.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let (first, rest) = rendered.split_once('\n').unwrap_or((&rendered, ""));
                let first = first.strip_prefix("error: ").unwrap_or(first);
                let _ = writeln!(err, "error[usage]: {first}");
                let _ = write!(err, "{rest}");
            }
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .is_test(cfg!(test))
        .try_init();
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {msg}", e.kind());
            e.exit_code()
        }
    }
}

/// [`run_with`] on the real stdout and stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{}", text.trim_end()).map_err(io_err(Path::new("<stdout>")))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut env = Env::new(cli)?;
    env.cfg.validate()?;
    match &cli.command {
        Command::Ingest(a) => ingest(&mut env, a, out),
        Command::Index(a) => build_index(&mut env, a, out),
        Command::Query(a) => query(&mut env, a, out),
        Command::Dataset(DatasetCommand::Gen(a)) => dataset_gen(&env, a, out),
        Command::Dataset(DatasetCommand::Split(a)) => dataset_split(&env, a, out),
        Command::Exam(ExamCommand::Run(a)) => exam_run(&mut env, a, out),
        Command::Exam(ExamCommand::Compare(a)) => exam_compare(&env, a, out),
        Command::Evaluate(a) => evaluate(&env, a, out),
        Command::Propose(a) => propose(&mut env, a, out),
        Command::Scenario(a) => scenario(&mut env, a, out),
        Command::LoraConfig(c) => lora_config(&env, c, out),
        Command::Config => emit(out, &env.cfg.to_string()),
    }
}

fn read_chunks(path: &Path) -> Result<Vec<Chunk>> {
    let text = read(path)?;
    let mut chunks = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: Chunk = serde_json::from_str(line)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        chunks.push(c);
    }
    if chunks.is_empty() {
        return Err(CliError::Input(format!("{}: no chunks", path.display())));
    }
    Ok(chunks)
}

fn ingest(env: &mut Env, a: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(c) = &a.corpus {
        env.cfg.corpus_dir = c.clone();
    }
    if let Some(s) = a.chunk_size {
        env.cfg.chunk_size = s;
    }
    if let Some(o) = a.chunk_overlap {
        env.cfg.chunk_overlap = o;
    }
    env.cfg.validate()?;
    let mut docs = corpus::load_corpus(&env.cfg.corpus_dir)?;
    let rules = CleanRules::default();
    let mut chunks = Vec::new();
    for d in &mut docs {
        d.clean(&rules);
        match corpus::chunk_document(d, env.cfg.chunk_size, env.cfg.chunk_overlap) {
            Ok(c) => chunks.extend(c),
            Err(CorpusError::EmptyDocument(id)) => log::warn!("{id}: nothing left after cleaning, skipped"),
            Err(e) => return Err(e.into()),
        }
    }
    let lines: Vec<String> = chunks.iter().map(|c| serde_json::to_string(c).expect("chunk serializes")).collect();
    write(&a.out, &(lines.join("\n") + "\n"))?;
    if env.json {
        emit(out, &pretty(&json!({"documents": docs.len(), "chunks": chunks.len(), "out": a.out})))
    } else {
        emit(out, &format!("{} documents -> {} chunks -> {}", docs.len(), chunks.len(), a.out.display()))
    }
}

fn build_index(env: &mut Env, a: &IndexArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(p) = &a.out {
        env.cfg.index_dir = p.clone();
    }
    let chunks = read_chunks(&a.chunks)?;
    let extraction = ExtractionConfig {
        model: env.cfg.chat.model.clone(),
        workers: env.workers,
        ..ExtractionConfig::default()
    };
    let llm: Option<&dyn ChatProvider> = if a.no_graph { None } else { Some(&*env.chat) };
    let mut idx = Index::new(env.embed.model_name());
    idx.store.upsert(index::embed_chunks(&chunks, &*env.embed, env.cfg.embed_batch)?)?;
    let mut skipped = 0;
    if let Some(llm) = llm {
        let (graph, report) = index::build_graph(&chunks, llm, &extraction)?;
        idx.graph = graph;
        skipped = report.skipped_records;
    }
    index::save_index(&idx, &env.cfg.index_dir)?;
    let (v, e, r) = (idx.store.len(), idx.graph.entity_count(), idx.graph.relation_count());
    if env.json {
        emit(
            out,
            &pretty(&json!({"vectors": v, "entities": e, "relations": r, "skipped_records": skipped, "out": env.cfg.index_dir})),
        )
    } else {
        emit(
            out,
            &format!(
                "{v} vectors, {e} entities, {r} relations ({skipped} unparseable records) -> {}",
                env.cfg.index_dir.display()
            ),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryTranscript {
    pub query: Query,
    pub context: retrieve::ContextBundle,
    pub prompt: String,
    pub answer: String,
}

fn query(env: &mut Env, a: &QueryArgs, out: &mut dyn Write) -> Result<()> {
    env.apply_retrieval(&a.retrieval)?;
    let template = match &a.template {
        Some(p) => read(p)?,
        None => retrieve::DEFAULT_ANSWER_TEMPLATE.to_string(),
    };
    let idx = env.load_index()?;
    let q = Query::new(a.text.clone(), env.cfg.mode).with_top_k(env.cfg.top_k);
    let ctx = retrieve::retrieve(&q, &idx, &*env.embed, &*env.chat, &env.retrieve_config())?;
    let prompt = retrieve::assemble_prompt(&q, &ctx, &template).map_err(RetrieveError::from)?;
    let answer = env.chat.chat(&env.chat_request(prompt.as_str()))?;
    let t = QueryTranscript {
        query: q,
        context: ctx,
        prompt,
        answer,
    };
    if let Some(path) = &a.transcript {
        write(path, &pretty(&t))?;
    }
    if env.json {
        emit(out, &pretty(&t))
    } else {
        emit(out, &t.answer)
    }
}

fn dataset_gen(env: &Env, a: &DatasetGenArgs, out: &mut dyn Write) -> Result<()> {
    let chunks = read_chunks(&a.chunks)?;
    let mut cfg = GenerationConfig {
        model: env.cfg.chat.model.clone(),
        temperature: env.cfg.chat_temperature,
        per_chunk: a.per_chunk,
        workers: env.workers,
        ..GenerationConfig::default()
    };
    if let Some(p) = &a.prompt {
        cfg.prompt = read(p)?;
    }
    let g = dataset::generate_entries(&chunks, &*env.chat, &cfg)?;
    let generated = g.entries.len();
    let entries = dataset::dedupe(g.entries);
    let rejects_path = a.rejects.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".rejects.jsonl");
        p.into()
    });
    dataset::write_jsonl(&a.out, &entries)?;
    dataset::write_jsonl(&rejects_path, &g.rejects)?;
    if let Some(abort) = g.aborted {
        return Err(CliError::Aborted(format!(
            "generation stopped at chunk {} ({}); {} entries written so far",
            abort.chunk_id,
            abort.error,
            entries.len()
        )));
    }
    let summary = json!({
        "generated": generated,
        "written": entries.len(),
        "duplicates": generated - entries.len(),
        "rejects": g.rejects.len(),
        "out": a.out,
        "rejects_file": rejects_path,
    });
    if env.json {
        emit(out, &pretty(&summary))
    } else {
        emit(
            out,
            &format!(
                "{} entries ({} duplicates dropped), {} rejects -> {}",
                entries.len(),
                generated - entries.len(),
                g.rejects.len(),
                a.out.display()
            ),
        )
    }
}

fn dataset_split(env: &Env, a: &DatasetSplitArgs, out: &mut dyn Write) -> Result<()> {
    let entries = dataset::dedupe(dataset::read_entries(&a.data)?);
    let s = dataset::split(&entries, a.ratio, a.seed)?;
    dataset::write_jsonl(&a.train, &s.train)?;
    dataset::write_jsonl(&a.test, &s.test)?;
    if env.json {
        emit(out, &pretty(&json!({"train": s.train.len(), "test": s.test.len(), "seed": s.seed, "ratio": s.ratio})))
    } else {
        emit(out, &format!("train {} / test {} (ratio {}, seed {})", s.train.len(), s.test.len(), s.ratio, s.seed))
    }
}

fn exam_run(env: &mut Env, a: &ExamRunArgs, out: &mut dyn Write) -> Result<()> {
    env.apply_retrieval(&a.retrieval)?;
    let bank = exam::load_bank(&a.bank)?;
    let cfg = VotingConfig {
        votes_per_round: env.cfg.votes_per_round,
        max_rounds: env.cfg.max_rounds,
        accumulate: env.cfg.accumulate_votes,
        model: env.cfg.chat.model.clone(),
        temperature: env.cfg.exam_temperature,
        workers: env.workers,
        ..VotingConfig::default()
    };
    let idx = if a.rag { Some(env.load_index()?) } else { None };
    let retriever = idx.as_ref().map(|i| env.retriever(i));
    let report = exam::run_exam(&bank, &*env.chat, retriever.as_ref().map(|r| r as &dyn Retriever), &cfg)?;
    if let Some(path) = &a.out {
        write(path, &pretty(&report))?;
    }
    if env.json {
        emit(out, &pretty(&report.summary()))?;
    } else {
        emit(out, &report.to_string())?;
    }
    match &report.aborted {
        Some(abort) => Err(CliError::Aborted(format!(
            "exam incomplete: stopped at {}: {}",
            abort.question_id, abort.message
        ))),
        None => Ok(()),
    }
}

fn exam_compare(env: &Env, a: &ExamCompareArgs, out: &mut dyn Write) -> Result<()> {
    let metric = match a.metric.as_str() {
        "mean" | "mean_of_kinds" => Metric::MeanOfKinds,
        "micro" => Metric::Micro,
        other => return Err(CliError::Usage(format!("unknown metric {other:?} (expected mean or micro)"))),
    };
    let mut reports = Vec::new();
    for spec in &a.reports {
        let (cell, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{spec:?}: expected MODEL:CONFIG=FILE")))?;
        let (model, config) = cell
            .split_once(':')
            .ok_or_else(|| CliError::Usage(format!("{spec:?}: expected MODEL:CONFIG=FILE")))?;
        let path = Path::new(path);
        let report: ExamReport =
            serde_json::from_str(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        reports.push((model.to_string(), config.to_string(), report));
    }
    let table = exam::compare_reports(&reports, metric)?;
    if env.json {
        emit(out, &pretty(&table.to_json()))
    } else {
        emit(out, &table.to_string())
    }
}

#[derive(Debug, Deserialize)]
struct PairLine {
    candidate: String,
    reference: String,
}

fn evaluate(env: &Env, a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let raw: Vec<(String, String)> = match (&a.pairs, &a.candidates, &a.references) {
        (Some(p), _, _) => read(p)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<PairLine>(l)
                    .map(|p| (p.candidate, p.reference))
                    .map_err(|e| CliError::Input(format!("{}:{}: {e}", p.display(), i + 1)))
            })
            .collect::<Result<_>>()?,
        (None, Some(c), Some(r)) => {
            let (cs, rs) = (read(c)?, read(r)?);
            let (cs, rs): (Vec<&str>, Vec<&str>) = (cs.lines().collect(), rs.lines().collect());
            if cs.len() != rs.len() {
                return Err(CliError::Input(format!("{} candidates but {} references", cs.len(), rs.len())));
            }
            cs.into_iter().zip(rs).map(|(c, r)| (c.to_string(), r.to_string())).collect()
        }
        _ => return Err(CliError::Usage("give --pairs, or --candidates with --references".into())),
    };
    let pairs: Vec<_> = raw
        .iter()
        .map(|(c, r)| (metrics::tokenize(c, a.tokenizer), metrics::tokenize(r, a.tokenizer)))
        .collect();
    let report = metrics::evaluate_corpus(&pairs, &BleuConfig::order(a.n))?;
    if env.json {
        emit(out, &pretty(&report.percentages()))
    } else {
        emit(out, &report.to_string())
    }
}

fn propose(env: &mut Env, a: &ProposeArgs, out: &mut dyn Write) -> Result<()> {
    env.apply_retrieval(&a.retrieval)?;
    let pre = collab::parse_precondition(&read(&a.precondition)?)?;
    let mut roles = RoleSpec::defaults();
    if let Some(dir) = a.templates.as_ref().or(env.cfg.templates_dir.as_ref()) {
        collab::apply_template_dir(&mut roles, dir)?;
    }
    let idx = if a.rag { Some(env.load_index()?) } else { None };
    let retriever = idx.as_ref().map(|i| env.retriever(i));
    let cfg = collab::PipelineConfig {
        model: env.cfg.chat.model.clone(),
        temperature: env.cfg.chat_temperature,
    };
    let result = collab::run_pipeline(&pre, &roles, &*env.chat, retriever.as_ref().map(|r| r as &dyn Retriever), &cfg);
    let bundle = match result {
        Ok(b) => b,
        Err(CollabError::Provider { role, source, partial }) => {
            if let Some(path) = &a.transcript {
                write(path, &partial.to_json())?;
            }
            return Err(CollabError::Provider { role, source, partial }.into());
        }
        Err(e) => return Err(e.into()),
    };
    for w in &bundle.warnings {
        log::warn!("{w}");
    }
    let proposal = bundle.proposal().unwrap_or_default().to_string();
    if let Some(path) = &a.out {
        write(path, &(proposal.clone() + "\n"))?;
    }
    if let Some(path) = &a.transcript {
        write(path, &bundle.to_json())?;
    }
    if env.json {
        emit(out, &bundle.to_json())
    } else {
        emit(out, &proposal)
    }
}

fn scenario(env: &mut Env, a: &ScenarioArgs, out: &mut dyn Write) -> Result<()> {
    env.apply_retrieval(&a.retrieval)?;
    let mut prompt = collab::scenario_prompt(a.kind, &a.body)?;
    let precondition = match &a.precondition {
        Some(p) => Some(collab::parse_precondition(&read(p)?)?),
        None => None,
    };
    if let Some(pre) = &precondition {
        prompt = format!("{prompt}\n\nStructure precondition:\n{}", pre.raw.trim_end());
    }
    if a.rag {
        let idx = env.load_index()?;
        let ctx = env.retriever(&idx).context(&prompt)?;
        if !ctx.rendered.is_empty() {
            prompt = format!("Reference material:\n{}\n\n{prompt}", ctx.rendered);
        }
    }
    if a.prompt_only {
        return if env.json {
            emit(out, &pretty(&json!({"prompt": prompt})))
        } else {
            emit(out, &prompt)
        };
    }
    let answer = env.chat.chat(&env.chat_request(prompt.as_str()))?;
    if env.json {
        emit(out, &pretty(&json!({"prompt": prompt, "answer": answer})))
    } else {
        emit(out, &answer)
    }
}

fn lora_config(env: &Env, c: &LoraCommand, out: &mut dyn Write) -> Result<()> {
    match c {
        LoraCommand::Emit { out: Some(path) } => {
            let cfg = FinetuneConfig::default();
            cfg.emit(path)?;
            emit(out, &format!("wrote {}", path.display()))
        }
        LoraCommand::Emit { out: None } => emit(out, &FinetuneConfig::default().to_string()),
        LoraCommand::Check { file } => {
            let cfg = FinetuneConfig::load(file)?;
            emit(out, &cfg.to_string())
        }
        LoraCommand::Savings { d_in, d_out, rank } => {
            let s = lora::param_savings(*d_in, *d_out, *rank)?;
            if env.json {
                emit(out, &pretty(&json!({"full": s.full, "lora": s.lora, "ratio": s.ratio, "percent": s.ratio_percent()})))
            } else {
                emit(out, &format!("full {}  lora {}  ratio {}%", s.full, s.lora, s.ratio_percent()))
            }
        }
    }
}
