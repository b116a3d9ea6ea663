//! `drag`: build indices, run experiments, annotate training corpora and
//! evaluate results files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drag_core::annotate::CorpusVariant;
use drag_core::gateway::{BackendSpec, ResponseCache};
use drag_core::metrics::LanguageIdentifier;
use drag_core::runner::{
    agreement_report, build_index, default_cache_path, render_report_text, report, run, run_annotation,
    AnnotateConfig, Perturbation, RunConfig, RunMode,
};

#[derive(Parser)]
#[command(name = "drag", version, about = "Multilingual retrieval-augmented generation with dialectic reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-base index operations.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run an experiment over a dataset.
    Run(RunArgs),
    /// Generate, filter and export a fine-tuning corpus.
    Annotate(AnnotateArgs),
    /// Compute metric tables (and deltas) from results files.
    Eval(EvalArgs),
    /// Controller agreement across three language versions.
    Agreement(AgreementArgs),
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build a binary index from a JSON-lines corpus.
    Build(IndexBuildArgs),
}

#[derive(Args)]
struct IndexBuildArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected embedding dimension; inferred from the first document when omitted.
    #[arg(long)]
    dim: Option<usize>,
    /// Backend config used to embed documents that carry no embedding.
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Rag,
    Drag,
    DragDecomposed,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => RunMode::Baseline,
            ModeArg::Rag => RunMode::Rag,
            ModeArg::Drag => RunMode::Drag,
            ModeArg::DragDecomposed => RunMode::DragDecomposed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbArg {
    None,
    Shuffle,
    Noise,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Generation backend config (TOML).
    #[arg(long)]
    backend: PathBuf,
    /// Backend config for query embeddings; defaults to the generation backend.
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    #[arg(long, value_enum, default_value = "none")]
    perturb: PerturbArg,
    /// Distractor pool (JSON-lines documents) for `--perturb noise`.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Comma-separated step numbers to drop from the dialectic prompt.
    #[arg(long, value_delimiter = ',')]
    ablate_steps: Vec<u8>,
    #[arg(long, default_value = "en")]
    arg_lang: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Restrict retrieval to these document languages (comma-separated).
    #[arg(long, value_delimiter = ',')]
    langs: Vec<String>,
    /// `builtin` or `cmd:<command>`.
    #[arg(long, default_value = "builtin")]
    lid: String,
    /// Response cache file; `drag_cache.jsonl` next to the output by default.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Directory of prompt templates replacing the built-in ones.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Process at most this many pending queries, leaving the rest for a resumed run.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Drag,
    SftBaseline,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    judge: PathBuf,
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "drag")]
    variant: VariantArg,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Recompute answer-language correctness with this identifier.
    #[arg(long)]
    lid: Option<String>,
    /// Compare files of different modes.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AgreementArgs {
    #[arg(long)]
    en: PathBuf,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn index_build(args: IndexBuildArgs) -> Result<()> {
    let backend = args
        .embedder
        .as_ref()
        .map(|p| BackendSpec::from_toml_file(p).and_then(|s| s.connect()))
        .transpose()?;
    let cache = match &args.cache {
        Some(path) => ResponseCache::open(path)?,
        None => ResponseCache::open(default_cache_path(&args.out))?,
    };
    let index = build_index(&args.corpus, args.dim, backend.as_deref().map(|b| (b, &cache)))?;
    index.save(&args.out)?;
    println!("indexed {} documents of dimension {} into {}", index.len(), index.dim(), args.out.display());
    Ok(())
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let mut config = RunConfig::new(args.mode.into(), args.dataset, args.backend, args.out);
    config.index = args.index;
    config.embedder = args.embedder;
    config.top_k_final = args.top_k;
    config.top_k_candidates = args.candidates;
    config.perturbation = match args.perturb {
        PerturbArg::None => Perturbation::None,
        PerturbArg::Shuffle => Perturbation::Shuffle,
        PerturbArg::Noise => Perturbation::Noise { count: 2, pool: args.pool.clone() },
    };
    if args.pool.is_some() && !matches!(args.perturb, PerturbArg::Noise) {
        bail!("--pool only applies to --perturb noise");
    }
    config.ablated_steps = args.ablate_steps.into_iter().collect();
    config.argumentation_language = args.arg_lang;
    config.seed = args.seed;
    config.concurrency = args.concurrency;
    config.retrieval_langs = (!args.langs.is_empty()).then(|| args.langs.into_iter().collect::<BTreeSet<_>>());
    config.lid = args.lid;
    config.cache = args.cache;
    config.template_dir = args.templates;
    config.limit = args.limit;

    let summary = run(&config)?;
    println!(
        "{} executed, {} resumed, {} remaining, {} errors, {} fully cached; {} records in {}",
        summary.executed,
        summary.skipped,
        summary.remaining,
        summary.errors,
        summary.cache_hits,
        summary.records,
        config.output.display()
    );
    if let Some(metrics) = &summary.metrics {
        println!("accuracy {}%", metrics.overall.accuracy.display_percent());
    }
    Ok(())
}

fn annotate_cmd(args: AnnotateArgs) -> Result<()> {
    let mut config = AnnotateConfig::new(args.dataset, args.index, args.teacher, args.judge, args.out);
    config.embedder = args.embedder;
    config.fraction = args.fraction;
    config.seed = args.seed;
    config.variant = match args.variant {
        VariantArg::Drag => CorpusVariant::Drag,
        VariantArg::SftBaseline => CorpusVariant::SftBaseline,
    };
    config.top_k_final = args.top_k;
    config.top_k_candidates = args.candidates;
    config.concurrency = args.concurrency;
    config.cache = args.cache;
    config.template_dir = args.templates;
    let summary = run_annotation(&config)?;
    let s = &summary.stats;
    println!(
        "{} candidates, {} valid, {} kept by exact match, {} approved by the judge; exported {} to {}",
        s.candidates,
        s.structurally_valid,
        s.stage1_kept,
        s.judge_approved,
        summary.exported,
        config.output.display()
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let lid = match &args.lid {
        Some(spec) => {
            Some(LanguageIdentifier::from_spec(spec).with_context(|| format!("unknown language identifier {spec:?}"))?)
        }
        None => None,
    };
    let rep = report(&args.results, args.force, lid.as_ref())?;
    write_json(&args.out, &rep)?;
    let text = render_report_text(&rep);
    let mut txt_path = args.out.into_os_string();
    txt_path.push(".txt");
    fs::write(&txt_path, &text)?;
    print!("{text}");
    Ok(())
}

fn agreement_cmd(args: AgreementArgs) -> Result<()> {
    let rep = agreement_report(&args.en, &args.x, &args.y, &args.dataset)?;
    write_json(&args.out, &rep)?;
    println!("{} groups: en {}%, x/y/en {}%", rep.groups, rep.pct_en, rep.pct_xyen);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(IndexCommand::Build(args)) => index_build(args),
        Command::Run(args) => run_cmd(args),
        Command::Annotate(args) => annotate_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Agreement(args) => agreement_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
