//! Command-line front end. Every command prints one JSON document on stdout;
//! progress and warnings go to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::load_model;
use crate::data::{
    build_reqa, make_splits, parse_rc_json, read_jsonl, split_sentences, stats_path, synthetic_one_to_many, write_jsonl,
    Answer, CandidatePool, RetrievalDataset, SyntheticConfig,
};
use crate::encoders::tokenize;
use crate::error::{EndxError, Result};
use crate::eval::{
    embed_corpus, embed_texts, evaluate, evaluate_bm25, fingerprint, load_or_build, rank_answers, similarity_matrix,
    write_similarity_csv, AnswerIndex, MetricsReport, INDEX_META,
};
use crate::model::Side;
use crate::tensor::Tensor;
use crate::trainer::{ablation_csv, ablation_matrix, train_to_dir, TrainConfig, BEST_CHECKPOINT, FINAL_CHECKPOINT};

#[derive(Debug, Parser)]
#[command(name = "endx", version, about = "Dual-encoder answer retrieval with cross-embedding geometry alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a retrieval dataset from reading-comprehension JSON (or the synthetic generator).
    Ingest(IngestArgs),
    /// Train a model and write checkpoints, vocabulary and log.
    Train(TrainArgs),
    /// Rank the dataset's answers for every question and report metrics.
    Eval(EvalArgs),
    /// Rank a prebuilt answer index for one question.
    Query(QueryArgs),
    /// Dataset statistics.
    Stats(StatsArgs),
    /// Train the six ablation configurations and tabulate them.
    Ablate(AblateArgs),
    /// Export pairwise similarities of the questions sharing one answer.
    Simmatrix(SimmatrixArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// SQuAD-format JSON.
    #[arg(long, required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = CandidatePool::Answers)]
    pub candidates: CandidatePool,
    /// Generate the synthetic one-to-many corpus instead of reading input.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: bool,
    /// Where the synthetic held-out paraphrases go.
    #[arg(long, requires = "synthetic")]
    pub test_output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "bm25")]
    pub checkpoint: Option<PathBuf>,
    /// Only answers with at least this many questions take part.
    #[arg(long)]
    pub min_questions: Option<usize>,
    /// Directory to cache the answer index in (reused when it matches).
    #[arg(long, conflicts_with = "bm25")]
    pub index: Option<PathBuf>,
    /// Evaluate the lexical baseline instead of a checkpoint.
    #[arg(long)]
    pub bm25: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training data; a tenth of its questions is held out for model selection.
    #[arg(long)]
    pub data: PathBuf,
    /// Test data; defaults to the held-out validation questions.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Tower {
    Dual,
    Cross,
}

#[derive(Debug, Args)]
pub struct SimmatrixArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the answer with the most questions (lowest id on ties).
    #[arg(long)]
    pub answer_id: Option<u32>,
    #[arg(long, value_enum, default_value_t = Tower::Dual)]
    pub tower: Tower,
    #[arg(long)]
    pub out: PathBuf,
}

/// What went wrong, and which exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(EndxError),
}

impl From<EndxError> for Failure {
    fn from(e: EndxError) -> Self {
        Failure::Runtime(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

fn existing(path: &Path) -> std::result::Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{} does not exist", path.display())))
    }
}

/// Work done while answering questions at inference time.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct InferenceCounters {
    pub cross_attention_calls: u64,
    pub question_encodings: u64,
    pub answer_encodings: u64,
    pub matvecs: u64,
    pub index_cache_hit: bool,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub counters: InferenceCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedAnswer {
    pub rank: usize,
    pub id: u32,
    pub score: f32,
    pub text: String,
}

#[derive(Debug)]
pub struct QueryOutcome {
    pub results: Vec<RankedAnswer>,
    pub counters: InferenceCounters,
}

pub fn ingest(args: &IngestArgs) -> std::result::Result<Value, Failure> {
    if args.synthetic {
        let data = synthetic_one_to_many(&SyntheticConfig { seed: args.seed, ..Default::default() })?;
        write_dataset(&data.train, &args.output)?;
        let mut out = json!({ "dataset": args.output, "stats": data.train.stats() });
        if let Some(test) = &args.test_output {
            write_dataset(&data.test, test)?;
            out["test"] = json!({ "dataset": test, "stats": data.test.stats() });
        }
        return Ok(out);
    }
    let input = args.input.as_deref().ok_or_else(|| Failure::Usage("--input is required".into()))?;
    existing(input)?;
    let passages = parse_rc_json(input)?;
    let built = build_reqa(&passages, split_sentences, args.candidates)?;
    write_dataset(&built.dataset, &args.output)?;
    Ok(json!({ "dataset": args.output, "stats": built.dataset.stats(), "skipped": built.skipped }))
}

fn write_dataset(ds: &RetrievalDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EndxError::io(dir, e))?;
    }
    write_jsonl(ds, path)?;
    let sp = stats_path(path);
    let text = serde_json::to_string_pretty(&ds.stats()).expect("stats serialize");
    std::fs::write(&sp, text + "\n").map_err(|e| EndxError::io(&sp, e))
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            existing(p)?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> std::result::Result<Value, Failure> {
    let cfg = train_config(args.config.as_deref(), args.seed)?;
    existing(&args.data)?;
    let ds = read_jsonl(&args.data)?;
    let out = train_to_dir(&ds, &cfg, &args.out)?;
    Ok(json!({
        "best_epoch": out.best_epoch,
        "best_val_r1": out.best_r1,
        "best_checkpoint": args.out.join(BEST_CHECKPOINT),
        "final_checkpoint": cfg.keep_final.then(|| args.out.join(FINAL_CHECKPOINT)),
    }))
}

pub fn eval(args: &EvalArgs) -> std::result::Result<EvalOutcome, Failure> {
    existing(&args.data)?;
    let ds = read_jsonl(&args.data)?;
    let Some(ckpt) = args.checkpoint.as_deref().filter(|_| !args.bm25) else {
        let report = evaluate_bm25(&ds, args.min_questions)?;
        return Ok(EvalOutcome { report, counters: InferenceCounters::default() });
    };
    existing(ckpt)?;
    let bytes = std::fs::read(ckpt).map_err(|e| EndxError::io(ckpt, e))?;
    let (model, vocab, _) = load_model(ckpt)?;
    let fp = fingerprint(&bytes, &ds.answers);
    let build = || embed_corpus(&ds.answers, &model, &vocab, fp.clone());
    let (index, hit) = match &args.index {
        Some(dir) => load_or_build(dir, &fp, build)?,
        None => (build()?, false),
    };
    let answer_encodings = model.dual_encodings();
    let report = evaluate(&model, &vocab, &ds, &index, args.min_questions)?;
    let counters = InferenceCounters {
        cross_attention_calls: model.cross_attention_calls(),
        question_encodings: model.dual_encodings() - answer_encodings,
        answer_encodings,
        matvecs: index.matvecs(),
        index_cache_hit: hit,
    };
    Ok(EvalOutcome { report, counters })
}

pub fn query(args: &QueryArgs) -> std::result::Result<QueryOutcome, Failure> {
    existing(&args.checkpoint)?;
    if !args.index.join(INDEX_META).exists() {
        return Err(Failure::Runtime(EndxError::Invalid(format!(
            "no answer index in {}; build one with `endx eval --data <answers.jsonl> --checkpoint {} --index {}`",
            args.index.display(),
            args.checkpoint.display(),
            args.index.display()
        ))));
    }
    if args.top == 0 {
        return Err(Failure::Usage("--top must be at least 1".into()));
    }
    let bytes = std::fs::read(&args.checkpoint).map_err(|e| EndxError::io(&args.checkpoint, e))?;
    let (model, vocab, _) = load_model(&args.checkpoint)?;
    let index = AnswerIndex::load(&args.index)?;
    let answers: Vec<Answer> = index.ids.iter().zip(&index.texts).map(|(&id, t)| Answer { id, text: t.clone() }).collect();
    if fingerprint(&bytes, &answers) != index.fingerprint {
        log::warn!("index in {} was built from a different checkpoint", args.index.display());
    }
    let ranked = rank_answers(&args.question, &index, &model, &vocab)?;
    let text_of: std::collections::HashMap<u32, &str> = index.ids.iter().copied().zip(index.texts.iter().map(String::as_str)).collect();
    let results = ranked
        .into_iter()
        .take(args.top)
        .enumerate()
        .map(|(i, (id, score))| RankedAnswer { rank: i + 1, id, score, text: text_of[&id].to_string() })
        .collect();
    let counters = InferenceCounters {
        cross_attention_calls: model.cross_attention_calls(),
        question_encodings: model.dual_encodings(),
        answer_encodings: 0,
        matvecs: index.matvecs(),
        index_cache_hit: true,
    };
    Ok(QueryOutcome { results, counters })
}

pub fn stats(args: &StatsArgs) -> std::result::Result<Value, Failure> {
    existing(&args.data)?;
    Ok(json!(read_jsonl(&args.data)?.stats()))
}

pub fn ablate(args: &AblateArgs) -> std::result::Result<Value, Failure> {
    let cfg = train_config(args.config.as_deref(), args.seed)?;
    existing(&args.data)?;
    let ds = read_jsonl(&args.data)?;
    let (tr, val) = make_splits(&ds, cfg.split_train_parts, cfg.split_total_parts, cfg.seed)?;
    let test = match &args.test {
        Some(p) => {
            existing(p)?;
            read_jsonl(p)?
        }
        None => val.clone(),
    };
    let rows = ablation_matrix(&tr, &val, &test, &cfg)?;
    std::fs::write(&args.out, ablation_csv(&rows)).map_err(|e| EndxError::io(&args.out, e))?;
    Ok(json!({ "csv": args.out, "rows": rows }))
}

pub fn simmatrix(args: &SimmatrixArgs) -> std::result::Result<Value, Failure> {
    existing(&args.data)?;
    existing(&args.checkpoint)?;
    let ds = read_jsonl(&args.data)?;
    let (model, vocab, _) = load_model(&args.checkpoint)?;
    let per_answer = ds.questions_per_answer();
    let a = match args.answer_id {
        Some(id) => ds
            .answers
            .iter()
            .position(|a| a.id == id)
            .ok_or_else(|| Failure::Usage(format!("answer {id} is not in {}", args.data.display())))?,
        // first maximum in id order
        None => (0..ds.answers.len()).rev().max_by_key(|&a| per_answer[a].len()).ok_or(EndxError::EmptyInput)?,
    };
    let qs = &per_answer[a];
    if qs.is_empty() {
        return Err(Failure::Runtime(EndxError::Invalid(format!("answer {} has no questions", ds.answers[a].id))));
    }
    let texts: Vec<&str> = qs.iter().map(|&q| ds.questions[q].text.as_str()).collect();
    let emb = match args.tower {
        Tower::Dual => embed_texts(&model, &vocab, Side::Question, &texts)?,
        Tower::Cross => {
            let answer = tokenize(&ds.answers[a].text, &vocab, model.max_len(Side::Answer))?;
            let mut rows = Vec::with_capacity(texts.len() * model.embedding_dim());
            for t in &texts {
                let q = tokenize(t, &vocab, model.max_len(Side::Question))?;
                rows.extend_from_slice(model.cross_embed(&q, &answer)?.0.data());
            }
            Tensor::new(&[texts.len(), model.embedding_dim()], rows)?
        }
    };
    let m = similarity_matrix(&emb)?;
    let ids: Vec<String> = qs.iter().map(|&q| ds.questions[q].id.clone()).collect();
    write_similarity_csv(&args.out, &ids, &m)?;
    Ok(json!({ "answer_id": ds.answers[a].id, "questions": ids.len(), "tower": format!("{:?}", args.tower).to_lowercase(), "csv": args.out }))
}

/// Runs one parsed command and returns its stdout document.
pub fn run(cli: &Cli) -> std::result::Result<Value, Failure> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => {
            let out = eval(a)?;
            eprintln!("inference work: {}", serde_json::to_string(&out.counters).expect("counters serialize"));
            Ok(json!(out.report))
        }
        Command::Query(a) => {
            let out = query(a)?;
            eprintln!("inference work: {}", serde_json::to_string(&out.counters).expect("counters serialize"));
            Ok(json!({ "question": a.question, "results": out.results }))
        }
        Command::Stats(a) => stats(a),
        Command::Ablate(a) => ablate(a),
        Command::Simmatrix(a) => simmatrix(a),
    }
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(v) = std::env::var("ENDX_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::Usage(format!("ENDX_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(EndxError::Invalid(e.to_string())))
}

/// Parses `args`, runs the command, prints its JSON and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|_| run(&cli));
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("output serializes"));
            0
        }
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
