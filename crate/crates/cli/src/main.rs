//! `inquire` — pipeline driver for question-query retrieval evaluation.
//!
//! Subcommands mirror the pipeline stages: `build-corpus`, `generate`,
//! `search`, `rerank`, `select`, `stats`, `report`, and `plot`. Run
//! `inquire <subcommand> --help` for the flags of each stage; the file
//! formats are documented in the library crate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use inquire_core::corpus::{
    build_datapoints, load_datapoints, write_datapoints, SectionMatcher, TitleIndex,
    DEFAULT_MASK_TOKEN, DEFAULT_SECTION_PATTERN,
};
use inquire_core::llm::{
    extract_keywords, generate_all, CachedTransport, ChatTransport, GenerationRequest,
    HttpTransport, HttpTransportConfig, ModelSettings, PromptTemplates, ResponseCache,
};
use inquire_core::pipeline::{
    evaluate, group_results, load_results, rank_groups, run_pipeline, write_results,
    CorrelationSignal, EvalInputs, EvalParams, PipelineConfig, ReferenceQuery, RerankedRecord,
    DEFAULT_K, DEFAULT_LAMBDA, DEFAULT_QUESTIONS, DEFAULT_RBO_P,
};
use inquire_core::ranked_lists::RboParams;
use inquire_core::rerank::{load_rerank_scores, rerank, QueryKind};
use inquire_core::report::{
    emit_plot_data, load_report, render_correlation_table, save_report, EvalReport, Figure,
};
use inquire_core::retrieval::{batch_search, load_query_vectors, EmbeddingStore};
use inquire_core::selection::SelectionConfig;

#[derive(Parser)]
#[command(name = "inquire", version, about = "Question-query retrieval evaluation toolkit")]
struct Cli {
    /// Retrieval and evaluation depth.
    #[arg(long, global = true, default_value_t = DEFAULT_K)]
    k: usize,
    /// RBO persistence parameter.
    #[arg(long, global = true, default_value_t = DEFAULT_RBO_P)]
    p: f64,
    /// MMR-RBO relevance/diversity trade-off.
    #[arg(long, global = true, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Questions per paragraph (generation).
    #[arg(long, global = true, default_value_t = DEFAULT_QUESTIONS)]
    questions: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse article XML, mask citations, and emit datapoints.
    BuildCorpus(BuildCorpusArgs),
    /// Generate question and keyword queries through a chat endpoint.
    Generate(GenerateArgs),
    /// Exact top-k search over ingested embeddings.
    Search(SearchArgs),
    /// Apply external rerank scores to context-query candidate sets.
    Rerank(RerankArgs),
    /// Rank each paragraph's questions by MMR-RBO.
    Select(SelectArgs),
    /// Correlate MMR-RBO with the target-rank signal across batches.
    Stats(StatsArgs),
    /// Run the full pipeline and write the evaluation report.
    Report(ReportArgs),
    /// Emit plot-ready tables from a report.
    Plot(PlotArgs),
}

#[derive(Args)]
struct BuildCorpusArgs {
    /// Directory of structured-article XML files.
    #[arg(long)]
    xml_dir: PathBuf,
    /// Corpus titles file ({"id", "title"} per line).
    #[arg(long)]
    titles: PathBuf,
    /// Output datapoints file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = DEFAULT_MASK_TOKEN)]
    mask_token: String,
    /// Case-insensitive regex matched against section headers.
    #[arg(long, default_value = DEFAULT_SECTION_PATTERN)]
    section_pattern: String,
}

#[derive(Args)]
struct GenerateArgs {
    /// Datapoints file providing contexts.
    #[arg(long)]
    datapoints: PathBuf,
    /// Chat-completions URL.
    #[arg(long)]
    endpoint: String,
    #[arg(long, default_value = "gpt-4o-mini")]
    model: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Response cache directory; reruns are served from disk.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// TOML file overriding the built-in prompt templates.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Where to write generated questions ({"paragraph_id",
    /// "question_index", "text"} per line).
    #[arg(long)]
    out_questions: Option<PathBuf>,
    /// Where to write keyword queries ({"paragraph_id", "keywords"} per
    /// line).
    #[arg(long)]
    out_keywords: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Binary embedding matrix.
    #[arg(long)]
    embeddings: PathBuf,
    /// Row/id manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Query vectors file.
    #[arg(long)]
    queries: PathBuf,
    /// Output results file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerankArgs {
    /// Search results file (provides the context candidate sets).
    #[arg(long)]
    results: PathBuf,
    /// Rerank score file.
    #[arg(long)]
    scores: PathBuf,
    /// Output reranked lists file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Search results file.
    #[arg(long)]
    results: PathBuf,
    /// Reference query anchoring sim_q: "keywords" or "context".
    #[arg(long, default_value = "keywords")]
    reference: ReferenceQuery,
    /// Output rankings file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Search results file.
    #[arg(long)]
    results: PathBuf,
    /// Datapoints file providing targets.
    #[arg(long)]
    datapoints: PathBuf,
    /// Optional rerank score file; enables reranked signals.
    #[arg(long)]
    rerank_scores: Option<PathBuf>,
    #[arg(long, default_value = "keywords")]
    reference: ReferenceQuery,
    /// Signal correlated against MMR-RBO: "reciprocal-rank" or
    /// "rank-delta".
    #[arg(long, default_value = "reciprocal-rank")]
    signal: CorrelationSignal,
    /// Batch sizes to sweep (truncating larger batches).
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 20])]
    question_counts: Vec<usize>,
    /// Lambda values to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.5, 1.0])]
    lambdas: Vec<f64>,
    /// Output TSV table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    datapoints: PathBuf,
    #[arg(long)]
    rerank_scores: Option<PathBuf>,
    #[arg(long, default_value = "keywords")]
    reference: ReferenceQuery,
    #[arg(long, default_value = "reciprocal-rank")]
    signal: CorrelationSignal,
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 20])]
    question_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.5, 1.0])]
    lambdas: Vec<f64>,
    /// Report output path.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also emit every available plot table into this directory.
    #[arg(long)]
    plots_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Report produced by the `report` subcommand.
    #[arg(long)]
    report: PathBuf,
    /// One of hit_ratio, rbo_ranked, mrr_rerank, correlation; omit for all.
    #[arg(long)]
    figure: Option<String>,
    /// Directory for the TSV tables.
    #[arg(long)]
    out_dir: PathBuf,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("error: {error:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCorpus(args) => build_corpus(args),
        Command::Generate(args) => generate(args, cli.questions),
        Command::Search(args) => search(args, cli.k),
        Command::Rerank(args) => apply_rerank(args),
        Command::Select(args) => select(args, cli.lambda, cli.p, cli.k),
        Command::Stats(args) => stats(args, cli.lambda, cli.p, cli.k),
        Command::Report(args) => report(args, cli.lambda, cli.p, cli.k),
        Command::Plot(args) => plot(args),
    }
}

fn build_corpus(args: BuildCorpusArgs) -> Result<()> {
    let matcher = SectionMatcher::new(&args.section_pattern)?;
    let index = TitleIndex::from_reader(open(&args.titles)?)?;
    let selection = build_datapoints(&args.xml_dir, &index, &matcher, &args.mask_token)?;
    let mut out = create(&args.out)?;
    write_datapoints(&mut out, &selection.datapoints)?;
    out.flush()?;
    log::info!(
        "kept {} datapoint(s); dropped {} (no citation: {}, no candidate: {}, ambiguous: {})",
        selection.datapoints.len(),
        selection.drops.total(),
        selection.drops.no_citation,
        selection.drops.no_candidate,
        selection.drops.multiple_candidates,
    );
    Ok(())
}

fn generate(args: GenerateArgs, questions: usize) -> Result<()> {
    if args.out_questions.is_none() && args.out_keywords.is_none() {
        bail!("nothing to do: pass --out-questions and/or --out-keywords");
    }
    let datapoints = load_datapoints(open(&args.datapoints)?)?;
    let templates = match &args.prompts {
        Some(path) => PromptTemplates::from_toml_file(path)?,
        None => PromptTemplates::default(),
    };
    let settings = ModelSettings {
        model: args.model.clone(),
        temperature: args.temperature,
    };
    let http = HttpTransport::new(HttpTransportConfig::new(args.endpoint.clone()))?;
    let transport: Box<dyn ChatTransport> = match &args.cache_dir {
        Some(dir) => Box::new(CachedTransport::new(http, ResponseCache::new(dir)?)),
        None => Box::new(http),
    };

    if let Some(path) = &args.out_questions {
        let requests: Vec<GenerationRequest> = datapoints
            .iter()
            .map(|d| {
                GenerationRequest::new(
                    d.paragraph_id.clone(),
                    d.context_window(),
                    questions,
                    settings.clone(),
                )
            })
            .collect::<Result<_, _>>()?;
        let results = generate_all(&requests, transport.as_ref(), &templates, args.max_in_flight);
        let mut out = create(path)?;
        for (request, result) in requests.iter().zip(results) {
            let generated =
                result.with_context(|| format!("paragraph {}", request.paragraph_id))?;
            for (i, text) in generated.iter().enumerate() {
                serde_json::to_writer(
                    &mut out,
                    &serde_json::json!({
                        "paragraph_id": request.paragraph_id,
                        "question_index": i + 1,
                        "text": text,
                    }),
                )?;
                out.write_all(b"\n")?;
            }
        }
        out.flush()?;
        log::info!("wrote {} question batches to {}", requests.len(), path.display());
    }

    if let Some(path) = &args.out_keywords {
        let mut out = create(path)?;
        for datapoint in &datapoints {
            let keywords =
                extract_keywords(datapoint.context_window(), transport.as_ref(), &settings, &templates)
                    .with_context(|| format!("paragraph {}", datapoint.paragraph_id))?;
            serde_json::to_writer(
                &mut out,
                &serde_json::json!({
                    "paragraph_id": datapoint.paragraph_id,
                    "keywords": keywords,
                }),
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        log::info!("wrote keyword queries to {}", path.display());
    }
    Ok(())
}

fn search(args: SearchArgs, k: usize) -> Result<()> {
    let store = EmbeddingStore::ingest(open(&args.embeddings)?, open(&args.manifest)?)?;
    let queries = load_query_vectors(open(&args.queries)?)?;
    log::info!(
        "searching {} quer(ies) against {} documents (dim {})",
        queries.len(),
        store.count(),
        store.dim()
    );
    let results = batch_search(&store, &queries, k)?;
    let mut out = create(&args.out)?;
    write_results(&mut out, &results)?;
    out.flush()?;
    Ok(())
}

fn apply_rerank(args: RerankArgs) -> Result<()> {
    let results = load_results(open(&args.results)?)?;
    let sets = load_rerank_scores(open(&args.scores)?)?;
    // Candidates come from each paragraph's context query results.
    let mut context_by_paragraph = std::collections::BTreeMap::new();
    for list in &results {
        if let Some((paragraph, query)) = inquire_core::pipeline::parse_query_id(list.query_id())
        {
            if query.kind == QueryKind::Context {
                context_by_paragraph.insert(paragraph.to_owned(), list);
            }
        }
    }
    let mut out = create(&args.out)?;
    let mut count = 0usize;
    for set in &sets {
        let candidates = context_by_paragraph
            .get(set.paragraph_id())
            .with_context(|| {
                format!(
                    "no context query results for paragraph {:?}",
                    set.paragraph_id()
                )
            })?;
        let list = rerank(candidates, set)?;
        let record = RerankedRecord {
            paragraph_id: set.paragraph_id().to_owned(),
            query_kind: set.query().kind,
            question_index: set.query().question_index,
            list,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        count += 1;
    }
    out.flush()?;
    log::info!("reranked {count} (paragraph, query) candidate sets");
    Ok(())
}

fn select(args: SelectArgs, lambda: f64, p: f64, k: usize) -> Result<()> {
    let results = load_results(open(&args.results)?)?;
    let groups = group_results(results)?;
    let config = SelectionConfig::new(lambda, RboParams::new(p, k)?)?;
    let records = rank_groups(&groups, args.reference, &config)?;
    let mut out = create(&args.out)?;
    for record in &records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    log::info!("ranked {} question batch(es)", records.len());
    Ok(())
}

fn stats(args: StatsArgs, lambda: f64, p: f64, k: usize) -> Result<()> {
    let results = load_results(open(&args.results)?)?;
    let groups = group_results(results)?;
    let datapoints = load_datapoints(open(&args.datapoints)?)?;
    let rerank_sets = match &args.rerank_scores {
        Some(path) => Some(load_rerank_scores(open(path)?)?),
        None => None,
    };
    let params = EvalParams {
        k,
        rbo_p: p,
        lambda,
        reference: args.reference,
        signal: args.signal,
        question_counts: args.question_counts,
        lambda_sweep: args.lambdas,
    };
    let inputs = EvalInputs {
        datapoints,
        groups,
        rerank_sets,
    };
    let (_, correlations) = evaluate(&inputs, &params)?;
    let mut out = create(&args.out)?;
    out.write_all(render_correlation_table(&correlations).as_bytes())?;
    out.flush()?;
    log::info!("wrote {} correlation row(s)", correlations.len());
    Ok(())
}

fn report(args: ReportArgs, lambda: f64, p: f64, k: usize) -> Result<()> {
    let config = PipelineConfig {
        embeddings: args.embeddings,
        manifest: args.manifest,
        queries: args.queries,
        datapoints: args.datapoints,
        rerank_scores: args.rerank_scores,
        params: EvalParams {
            k,
            rbo_p: p,
            lambda,
            reference: args.reference,
            signal: args.signal,
            question_counts: args.question_counts,
            lambda_sweep: args.lambdas,
        },
    };
    let report = run_pipeline(&config)?;
    let mut out = create(&args.out)?;
    save_report(&report, &mut out)?;
    out.flush()?;
    log::info!("wrote report to {}", args.out.display());
    if let Some(dir) = &args.plots_dir {
        emit_figures(&report, None, dir)?;
    }
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let report = load_report(open(&args.report)?)?;
    let figure = args
        .figure
        .as_deref()
        .map(str::parse::<Figure>)
        .transpose()?;
    emit_figures(&report, figure, &args.out_dir)
}

fn emit_figures(report: &EvalReport, only: Option<Figure>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let figures: Vec<Figure> = match only {
        Some(figure) => vec![figure],
        None => Figure::ALL.to_vec(),
    };
    for figure in figures {
        let path = dir.join(format!("{}.tsv", figure.name()));
        let mut out = create(&path)?;
        match emit_plot_data(report, figure, &mut out) {
            Ok(()) => {
                out.flush()?;
                log::info!("wrote {}", path.display());
            }
            Err(inquire_core::report::ReportError::UnavailableData { .. }) if only.is_none() => {
                drop(out);
                std::fs::remove_file(&path).ok();
                log::warn!("skipping {}: stage not run", figure.name());
            }
            Err(error) => return Err(error.into()),
        }
    }
    Ok(())
}
