use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use qkf_core::corpus::{corpus_hash, parse_kb, parse_queries, parse_queries_strict, write_kb, KnowledgeBase, QueryLine};
use qkf_core::evalx::{aggregate, parse_truths};
use qkf_core::pipeline::{read_output, run_batch, Engine, Mode, OutputLine};
use qkf_core::providers::Providers;
use qkf_core::qff::{build_training_set, mean_loss, read_checkpoint, train, write_checkpoint, QffParams};
use qkf_core::retrieval::RetrievalIndex;
use qkf_core::{load_config, PipelineConfig};

#[derive(Parser)]
#[command(name = "qkf", version, about = "Question-focused knowledge filtering for retrieval-augmented QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a knowledge base and write it back normalized.
    Ingest(IoArgs),
    /// Build and persist the retrieval index.
    Index(IoArgs),
    /// Dump the top-K retrieved articles per query.
    Retrieve(RunArgs),
    /// Retrieval, filtering and chunk selection without generation.
    Filter(RunArgs),
    /// The full pipeline.
    Answer(RunArgs),
    /// Train the question-focused filter.
    Train(TrainArgs),
    /// Metrics from answer records and ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["toy", "http"])]
    provider: Option<String>,
    #[arg(long, env = "QKF_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    u: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct IoArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prebuilt index; built on the fly when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Trained filter parameters; a seeded untrained filter when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Where the trained checkpoint is written.
    #[arg(long)]
    out: PathBuf,
    /// Resume from these parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Per-step loss trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    relaxed_tolerance: Option<f64>,
    #[command(flatten)]
    common: Common,
}

/// Usage problems exit with 1, everything else with 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn flag_map(c: &Common, extra: &[(&str, Option<Value>)]) -> Map<String, Value> {
    let mut m = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.to_owned(), v);
        }
    };
    put("provider", c.provider.as_ref().map(|v| json!(v)));
    put("endpoint", c.endpoint.as_ref().map(|v| json!(v)));
    put("k", c.k.map(|v| json!(v)));
    put("u", c.u.map(|v| json!(v)));
    put("alpha", c.alpha.map(|v| json!(v)));
    put("tau", c.tau.map(|v| json!(v)));
    put("theta", c.theta.map(|v| json!(v)));
    put("lambda", c.lambda.map(|v| json!(v)));
    put("k1", c.k1.map(|v| json!(v)));
    put("k2", c.k2.map(|v| json!(v)));
    put("chunk_len", c.chunk_len.map(|v| json!(v)));
    put("template", c.template.as_ref().map(|v| json!(v)));
    put("seed", c.seed.map(|v| json!(v)));
    put("workers", c.workers.map(|v| json!(v)));
    for (k, v) in extra {
        put(k, v.clone());
    }
    m
}

fn resolve(c: &Common, extra: &[(&str, Option<Value>)]) -> Result<PipelineConfig, Failure> {
    let resolved = load_config(c.config.as_deref(), &flag_map(c, extra))
        .map_err(|e| Failure::Usage(anyhow!(e).context("invalid configuration")))?;
    let text = serde_json::to_string(&resolved.config).map_err(anyhow::Error::from)?;
    eprintln!("resolved config: {text}");
    Ok(resolved.config)
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_kb(path: &Path, providers: &Providers) -> anyhow::Result<KnowledgeBase> {
    let parsed = parse_kb(open(path)?).with_context(|| format!("reading knowledge base {}", path.display()))?;
    if parsed.dropped_sections > 0 {
        log::warn!("dropped {} empty sections", parsed.dropped_sections);
    }
    Ok(KnowledgeBase::new(parsed.articles, providers.embedder.as_ref())?)
}

fn load_index(path: Option<&Path>, kb: &KnowledgeBase, providers: &Providers) -> anyhow::Result<RetrievalIndex> {
    let Some(path) = path else {
        return Ok(RetrievalIndex::build(kb.articles(), providers.embedder.as_ref())?);
    };
    let index = RetrievalIndex::read_from(open(path)?).with_context(|| format!("reading index {}", path.display()))?;
    if index.corpus_hash() != &corpus_hash(kb.articles()) {
        bail!("index {} was built from a different knowledge base", path.display());
    }
    if index.provider() != providers.embedder.name() || index.dimension() != providers.embedder.dimension() {
        bail!(
            "index {} was built with provider {} (dimension {}), current is {} (dimension {})",
            path.display(),
            index.provider(),
            index.dimension(),
            providers.embedder.name(),
            providers.embedder.dimension()
        );
    }
    Ok(index)
}

fn load_params(path: Option<&Path>, config: &PipelineConfig) -> anyhow::Result<QffParams> {
    match path {
        Some(p) => {
            let params = read_checkpoint(open(p)?).with_context(|| format!("reading checkpoint {}", p.display()))?;
            if params.shape.image_dim != config.provider_dim {
                bail!(
                    "checkpoint image dimension {} does not match provider dimension {}",
                    params.shape.image_dim,
                    config.provider_dim
                );
            }
            Ok(params)
        }
        None => {
            log::warn!("no --checkpoint given, using an untrained filter (seed {})", config.seed);
            Ok(QffParams::init(config.qff_shape())?)
        }
    }
}

fn ingest(args: IoArgs) -> Outcome {
    resolve(&args.common, &[])?;
    let parsed = parse_kb(open(&args.kb)?).with_context(|| format!("reading {}", args.kb.display()))?;
    let sections: usize = parsed.articles.iter().map(|a| a.sections.len()).sum();
    let mut out = create(&args.out)?;
    write_kb(&parsed.articles, &mut out).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    println!(
        "{} articles, {} sections, {} empty sections dropped",
        parsed.articles.len(),
        sections,
        parsed.dropped_sections
    );
    Ok(())
}

fn index(args: IoArgs) -> Outcome {
    let config = resolve(&args.common, &[])?;
    let providers = Providers::from_config(&config.provider_config()).map_err(anyhow::Error::from)?;
    let kb = load_kb(&args.kb, &providers)?;
    let index = RetrievalIndex::build(kb.articles(), providers.embedder.as_ref()).map_err(anyhow::Error::from)?;
    let mut out = create(&args.out)?;
    index.write_to(&mut out).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    println!("indexed {} articles (dimension {})", index.len(), index.dimension());
    Ok(())
}

fn retrieve(args: RunArgs) -> Outcome {
    let config = resolve(&args.common, &[])?;
    let providers = Providers::from_config(&config.provider_config()).map_err(anyhow::Error::from)?;
    let kb = load_kb(&args.kb, &providers)?;
    let index = load_index(args.index.as_deref(), &kb, &providers)?;
    let lines = parse_queries(open(&args.queries)?).map_err(anyhow::Error::from)?;
    let mut out = create(&args.out)?;
    for line in &lines {
        let record = match line {
            QueryLine::Ok(q) => {
                let result = q
                    .image
                    .as_ref()
                    .ok_or_else(|| anyhow!("query has no image"))
                    .and_then(|img| Ok(providers.embedder.embed_image(img)?))
                    .and_then(|v| Ok(index.retrieve_topk(&v, config.k)?));
                match result {
                    Ok(list) => json!({"qid": q.qid, "retrieved": list}),
                    Err(e) => json!({"qid": q.qid, "error": {"stage": "retrieve", "message": e.to_string()}}),
                }
            }
            QueryLine::Malformed { line, qid, message } => {
                json!({"qid": qid, "line": line, "error": {"stage": "parse", "message": message}})
            }
        };
        writeln!(out, "{record}").map_err(anyhow::Error::from)?;
    }
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn run(args: RunArgs, mode: Mode) -> Outcome {
    let config = resolve(&args.common, &[])?;
    let providers = Providers::from_config(&config.provider_config()).map_err(anyhow::Error::from)?;
    let kb = load_kb(&args.kb, &providers)?;
    let index = load_index(args.index.as_deref(), &kb, &providers)?;
    let params = load_params(args.checkpoint.as_deref(), &config)?;
    let lines = parse_queries(open(&args.queries)?).map_err(anyhow::Error::from)?;
    let engine = Engine::new(kb, index, params, providers);
    let out = create(&args.out)?;
    let summary = run_batch(&lines, &engine, &config, mode, out).map_err(anyhow::Error::from)?;
    println!(
        "{} queries, {} answered, {} errors, mean total {:.2} ms",
        summary.count, summary.answered, summary.errors, summary.mean_timings_ms.total
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Outcome {
    let extra = [
        ("steps", args.steps.map(|v| json!(v))),
        ("lr", args.lr.map(|v| json!(v))),
        ("batch", args.batch.map(|v| json!(v))),
        ("negatives", args.negatives.map(|v| json!(v))),
    ];
    let config = resolve(&args.common, &extra)?;
    let providers = Providers::from_config(&config.provider_config()).map_err(anyhow::Error::from)?;
    let kb = load_kb(&args.kb, &providers)?;
    let index = load_index(args.index.as_deref(), &kb, &providers)?;
    let queries = parse_queries_strict(open(&args.queries)?).map_err(anyhow::Error::from)?;
    let train_config = config.train_config();
    let examples = build_training_set(&kb, &index, providers.embedder.as_ref(), &queries, &train_config)
        .map_err(anyhow::Error::from)?;
    if examples.is_empty() {
        return Err(Failure::Runtime(anyhow!("no query carries an evidence section")));
    }
    let params = match &args.checkpoint {
        Some(_) => load_params(args.checkpoint.as_deref(), &config)?,
        None => QffParams::init(config.qff_shape()).map_err(anyhow::Error::from)?,
    };
    let initial = mean_loss(&params, &examples, train_config.tau).map_err(anyhow::Error::from)?;
    let outcome = train(params, &examples, &train_config, |_, _| Ok(())).map_err(anyhow::Error::from)?;
    let final_loss = mean_loss(&outcome.params, &examples, train_config.tau).map_err(anyhow::Error::from)?;
    let mut out = create(&args.out)?;
    write_checkpoint(&outcome.params, &mut out).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    if let Some(path) = &args.trace {
        let mut t = create(path)?;
        for step in &outcome.trace {
            serde_json::to_writer(&mut t, step).map_err(anyhow::Error::from)?;
            writeln!(t).map_err(anyhow::Error::from)?;
        }
        t.flush().map_err(anyhow::Error::from)?;
    }
    println!(
        "{} examples, {} steps, mean loss {initial:.6} -> {final_loss:.6}",
        examples.len(),
        train_config.steps
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let extra = [("relaxed_tolerance", args.relaxed_tolerance.map(|v| json!(v)))];
    let config = resolve(&args.common, &extra)?;
    let lines = read_output(open(&args.records)?).map_err(anyhow::Error::from)?;
    let mut records = Vec::new();
    let mut errors = 0;
    for line in lines {
        match line {
            OutputLine::Answer(a) => records.push(*a),
            _ => errors += 1,
        }
    }
    if errors > 0 {
        log::warn!("{errors} error records are not evaluated");
    }
    let truths = parse_truths(open(&args.truth)?).map_err(anyhow::Error::from)?;
    let report = aggregate(&records, &truths, config.relaxed_tolerance).map_err(anyhow::Error::from)?;
    print!("{}", report.text_table());
    let mut out = create(&args.out)?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(anyhow::Error::from)?;
    writeln!(out).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Index(a) => index(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Filter(a) => run(a, Mode::FilterOnly),
        Command::Answer(a) => run(a, Mode::Full),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
