//! Stage orchestration over the documented file formats: search, optional
//! rerank, selection, correlation stats, and report assembly.
//!
//! Query vector files associate vectors with paragraphs through the query id
//! convention `<paragraph_id>::context`, `<paragraph_id>::keywords`, and
//! `<paragraph_id>::q<N>` with 1-based question numbers. Every stage is
//! deterministic given identical inputs: rerunning a pipeline produces an
//! identical report apart from its timestamp.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_datapoints, Datapoint};
use crate::ranked_lists::{rbo, reciprocal_rank, RankedList, RboParams};
use crate::rerank::{
    batch_rerank_summary, load_rerank_scores, rerank, QueryKind, QueryRef, RerankScoreSet,
};
use crate::report::{Aggregates, EvalReport, ParagraphRecord, Provenance, QueryOutcome};
use crate::retrieval::{batch_search, load_query_vectors, EmbeddingStore};
use crate::selection::{rank_batch, QuestionBatch, SelectionConfig};
use crate::stats::{batch_correlation_summary, global_correlation, CorrelationSummary, StatsError};
use crate::DocId;

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_RBO_P: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_QUESTIONS: usize = 20;
pub const DEFAULT_QUESTION_COUNTS: [usize; 3] = [5, 10, 20];
pub const DEFAULT_LAMBDA_SWEEP: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {message}")]
    Config { message: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl PipelineError {
    pub fn config(message: impl Into<String>) -> Self {
        PipelineError::Config {
            message: message.into(),
        }
    }

    pub fn stage(
        stage: &'static str,
        source: impl std::error::Error + Send + Sync + 'static,
    ) -> Self {
        PipelineError::Stage {
            stage,
            source: Box::new(source),
        }
    }

    fn stage_msg(stage: &'static str, message: impl Into<String>) -> Self {
        PipelineError::Stage {
            stage,
            source: Box::new(std::io::Error::other(message.into())),
        }
    }
}

/// Which verifiably good query anchors `sim_q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceQuery {
    Context,
    #[default]
    Keywords,
}

impl FromStr for ReferenceQuery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "context" => Ok(Self::Context),
            "keywords" => Ok(Self::Keywords),
            other => Err(format!("unknown reference query {other:?}")),
        }
    }
}

/// The per-question quantity correlated against MMR-RBO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSignal {
    /// Reciprocal rank of the target (in the reranked list when the rerank
    /// stage ran, in the retrieval list otherwise).
    #[default]
    ReciprocalRank,
    /// Rank movement under reranking; requires the rerank stage.
    RankDelta,
}

impl FromStr for CorrelationSignal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reciprocal-rank" | "reciprocal_rank" => Ok(Self::ReciprocalRank),
            "rank-delta" | "rank_delta" => Ok(Self::RankDelta),
            other => Err(format!("unknown correlation signal {other:?}")),
        }
    }
}

/// Metric parameters shared by the pipeline and the stage subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalParams {
    pub k: usize,
    pub rbo_p: f64,
    pub lambda: f64,
    pub reference: ReferenceQuery,
    pub signal: CorrelationSignal,
    pub question_counts: Vec<usize>,
    pub lambda_sweep: Vec<f64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            rbo_p: DEFAULT_RBO_P,
            lambda: DEFAULT_LAMBDA,
            reference: ReferenceQuery::default(),
            signal: CorrelationSignal::default(),
            question_counts: DEFAULT_QUESTION_COUNTS.to_vec(),
            lambda_sweep: DEFAULT_LAMBDA_SWEEP.to_vec(),
        }
    }
}

impl EvalParams {
    fn validate(&self) -> Result<(RboParams, SelectionConfig), PipelineError> {
        let params = RboParams::new(self.rbo_p, self.k)
            .map_err(|e| PipelineError::config(e.to_string()))?;
        let config = SelectionConfig::new(self.lambda, params)
            .map_err(|e| PipelineError::config(e.to_string()))?;
        for &lambda in &self.lambda_sweep {
            SelectionConfig::new(lambda, params)
                .map_err(|e| PipelineError::config(e.to_string()))?;
        }
        for &n in &self.question_counts {
            if n < 2 {
                return Err(PipelineError::config(format!(
                    "question count {n} cannot be correlated; need at least 2"
                )));
            }
        }
        Ok((params, config))
    }
}

/// File inputs plus metric parameters for a full pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
    pub queries: PathBuf,
    pub datapoints: PathBuf,
    pub rerank_scores: Option<PathBuf>,
    #[serde(flatten)]
    pub params: EvalParams,
}

impl PipelineConfig {
    pub fn new(
        embeddings: impl Into<PathBuf>,
        manifest: impl Into<PathBuf>,
        queries: impl Into<PathBuf>,
        datapoints: impl Into<PathBuf>,
    ) -> Self {
        Self {
            embeddings: embeddings.into(),
            manifest: manifest.into(),
            queries: queries.into(),
            datapoints: datapoints.into(),
            rerank_scores: None,
            params: EvalParams::default(),
        }
    }
}

/// Builds the query id for one paragraph query.
pub fn query_id(paragraph_id: &str, query: QueryRef) -> String {
    match (query.kind, query.question_index) {
        (QueryKind::Context, _) => format!("{paragraph_id}::context"),
        (QueryKind::Keywords, _) => format!("{paragraph_id}::keywords"),
        (QueryKind::Question, Some(index)) => format!("{paragraph_id}::q{index}"),
        (QueryKind::Question, None) => unreachable!("question refs carry an index"),
    }
}

/// Splits a query id into its paragraph id and query reference.
pub fn parse_query_id(id: &str) -> Option<(&str, QueryRef)> {
    let (paragraph, suffix) = id.rsplit_once("::")?;
    let query = match suffix {
        "context" => QueryRef::context(),
        "keywords" => QueryRef::keywords(),
        _ => {
            let index: usize = suffix.strip_prefix('q')?.parse().ok()?;
            if index == 0 {
                return None;
            }
            QueryRef::question(index)
        }
    };
    Some((paragraph, query))
}

/// One paragraph's retrieval results: the context and keyword queries plus
/// the question queries in generation order.
#[derive(Debug, Clone)]
pub struct ParagraphQueries {
    pub paragraph_id: String,
    pub context: RankedList,
    pub keywords: RankedList,
    pub questions: Vec<RankedList>,
}

impl ParagraphQueries {
    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }
}

/// Groups ranked lists by paragraph via the query id convention. Every
/// paragraph must have a context list, a keyword list, and questions
/// numbered contiguously from 1.
pub fn group_results(
    lists: Vec<RankedList>,
) -> Result<BTreeMap<String, ParagraphQueries>, PipelineError> {
    struct Partial {
        context: Option<RankedList>,
        keywords: Option<RankedList>,
        questions: BTreeMap<usize, RankedList>,
    }
    let mut partials: BTreeMap<String, Partial> = BTreeMap::new();
    for list in lists {
        let (paragraph, query) = match parse_query_id(list.query_id()) {
            Some((paragraph, query)) => (paragraph.to_owned(), query),
            None => {
                return Err(PipelineError::stage_msg(
                    "search",
                    format!(
                        "query id {:?} does not follow <paragraph>::context|keywords|q<N>",
                        list.query_id()
                    ),
                ))
            }
        };
        let partial = partials.entry(paragraph.clone()).or_insert(Partial {
            context: None,
            keywords: None,
            questions: BTreeMap::new(),
        });
        let duplicate = match query.kind {
            QueryKind::Context => partial.context.replace(list).is_some(),
            QueryKind::Keywords => partial.keywords.replace(list).is_some(),
            QueryKind::Question => partial
                .questions
                .insert(query.question_index.unwrap(), list)
                .is_some(),
        };
        if duplicate {
            return Err(PipelineError::stage_msg(
                "search",
                format!("duplicate results for paragraph {paragraph:?} query {}", query.label()),
            ));
        }
    }

    let mut groups = BTreeMap::new();
    for (paragraph_id, partial) in partials {
        let context = partial.context.ok_or_else(|| {
            PipelineError::stage_msg(
                "search",
                format!("paragraph {paragraph_id:?} has no context query results"),
            )
        })?;
        let keywords = partial.keywords.ok_or_else(|| {
            PipelineError::stage_msg(
                "search",
                format!("paragraph {paragraph_id:?} has no keyword query results"),
            )
        })?;
        let n = partial.questions.len();
        if n == 0 {
            return Err(PipelineError::stage_msg(
                "search",
                format!("paragraph {paragraph_id:?} has no question query results"),
            ));
        }
        if *partial.questions.keys().last().unwrap() != n {
            return Err(PipelineError::stage_msg(
                "search",
                format!(
                    "paragraph {paragraph_id:?} question indices are not contiguous from 1 \
                     (got {:?})",
                    partial.questions.keys().collect::<Vec<_>>()
                ),
            ));
        }
        groups.insert(
            paragraph_id.clone(),
            ParagraphQueries {
                paragraph_id,
                context,
                keywords,
                questions: partial.questions.into_values().collect(),
            },
        );
    }
    Ok(groups)
}

/// Writes search results, one serialized ranked list per line.
pub fn write_results(mut sink: impl Write, lists: &[RankedList]) -> Result<(), PipelineError> {
    for list in lists {
        serde_json::to_writer(&mut sink, list)
            .map_err(|e| PipelineError::stage("search", e))?;
        sink.write_all(b"\n")
            .map_err(|e| PipelineError::stage("search", e))?;
    }
    Ok(())
}

/// Reads search results written by [`write_results`].
pub fn load_results(source: impl BufRead) -> Result<Vec<RankedList>, PipelineError> {
    let mut lists = Vec::new();
    for (line_no, line) in source.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::stage("search", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let list: RankedList = serde_json::from_str(&line).map_err(|e| {
            PipelineError::stage_msg("search", format!("results line {}: {e}", line_no + 1))
        })?;
        lists.push(list);
    }
    Ok(lists)
}

/// A reranked result list tagged with the query that produced the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedRecord {
    pub paragraph_id: String,
    pub query_kind: QueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_index: Option<usize>,
    pub list: RankedList,
}

/// In-batch MMR-RBO ranking for one paragraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub paragraph_id: String,
    pub lambda: f64,
    /// Question indices are 1-based generation order, best first.
    pub ranking: Vec<RankedQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedQuestion {
    pub question_index: usize,
    pub score: f64,
}

/// Scores every batch with MMR-RBO; the building block of the `select`
/// subcommand.
pub fn rank_groups(
    groups: &BTreeMap<String, ParagraphQueries>,
    reference: ReferenceQuery,
    config: &SelectionConfig,
) -> Result<Vec<RankingRecord>, PipelineError> {
    let mut records = Vec::with_capacity(groups.len());
    for queries in groups.values() {
        let batch = build_batch(queries, reference, None)?;
        let ranking = rank_batch(&batch, config)
            .into_iter()
            .map(|(index, score)| RankedQuestion {
                question_index: index + 1,
                score,
            })
            .collect();
        records.push(RankingRecord {
            paragraph_id: queries.paragraph_id.clone(),
            lambda: config.lambda(),
            ranking,
        });
    }
    Ok(records)
}

fn build_batch(
    queries: &ParagraphQueries,
    reference: ReferenceQuery,
    target: Option<DocId>,
) -> Result<QuestionBatch, PipelineError> {
    let reference_list = match reference {
        ReferenceQuery::Context => queries.context.clone(),
        ReferenceQuery::Keywords => queries.keywords.clone(),
    };
    QuestionBatch::new(
        queries.paragraph_id.clone(),
        reference_list,
        queries.questions.clone(),
        target,
    )
    .map_err(|e| PipelineError::stage("select", e))
}

/// Per-question rerank outcome inside one paragraph.
#[derive(Debug, Clone)]
struct RerankEval {
    /// Reciprocal rank / delta per query ref.
    by_query: BTreeMap<QueryRef, (f64, f64)>,
}

/// Inputs to [`evaluate`]: loaded datapoints, grouped retrieval results,
/// and optional rerank score sets.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub datapoints: Vec<Datapoint>,
    pub groups: BTreeMap<String, ParagraphQueries>,
    pub rerank_sets: Option<Vec<RerankScoreSet>>,
}

/// Runs selection, optional rerank application, and the correlation sweep
/// over already-loaded inputs.
pub fn evaluate(
    inputs: &EvalInputs,
    params: &EvalParams,
) -> Result<(Vec<ParagraphRecord>, Vec<CorrelationSummary>), PipelineError> {
    let (rbo_params, headline_config) = params.validate()?;
    if inputs.datapoints.is_empty() {
        return Err(PipelineError::config("datapoints file yields no paragraphs"));
    }
    if params.signal == CorrelationSignal::RankDelta && inputs.rerank_sets.is_none() {
        return Err(PipelineError::config(
            "signal rank-delta requires rerank scores",
        ));
    }

    let rerank_by_paragraph: Option<BTreeMap<String, BTreeMap<QueryRef, RerankScoreSet>>> =
        inputs.rerank_sets.as_ref().map(|sets| {
            let mut map: BTreeMap<String, BTreeMap<QueryRef, RerankScoreSet>> = BTreeMap::new();
            for set in sets {
                map.entry(set.paragraph_id().to_owned())
                    .or_default()
                    .insert(set.query(), set.clone());
            }
            map
        });

    let mut records = Vec::with_capacity(inputs.datapoints.len());
    let mut batches: Vec<BatchEval> = Vec::with_capacity(inputs.datapoints.len());

    for datapoint in &inputs.datapoints {
        let queries = inputs.groups.get(&datapoint.paragraph_id).ok_or_else(|| {
            PipelineError::stage_msg(
                "select",
                format!(
                    "no retrieval results for paragraph {:?}",
                    datapoint.paragraph_id
                ),
            )
        })?;
        let target = &datapoint.target_id;

        let rerank_eval = match &rerank_by_paragraph {
            Some(by_paragraph) => Some(apply_rerank(
                queries,
                target,
                by_paragraph.get(&datapoint.paragraph_id),
            )?),
            None => None,
        };

        // Full-batch MMR-RBO at the headline lambda.
        let batch = build_batch(queries, params.reference, Some(target.clone()))?;
        let mut mmr_by_index = vec![0.0f64; queries.n_questions()];
        for (index, score) in rank_batch(&batch, &headline_config) {
            mmr_by_index[index] = score;
        }

        let mut outcomes = Vec::with_capacity(2 + queries.n_questions());
        let mut push = |kind: QueryKind, index: Option<usize>, list: &RankedList| {
            let rr = reciprocal_rank(list, target);
            let query_ref = match (kind, index) {
                (QueryKind::Question, Some(i)) => QueryRef::question(i),
                (QueryKind::Context, _) => QueryRef::context(),
                (QueryKind::Keywords, _) => QueryRef::keywords(),
                _ => unreachable!(),
            };
            let reranked = rerank_eval
                .as_ref()
                .and_then(|eval| eval.by_query.get(&query_ref).copied());
            outcomes.push(QueryOutcome {
                kind,
                question_index: index,
                hit: list.hit_at(target, params.k),
                reciprocal_rank: rr,
                rbo_vs_context: (kind == QueryKind::Question)
                    .then(|| rbo(list, &queries.context, &rbo_params)),
                mmr_rbo: index.map(|i| mmr_by_index[i - 1]),
                rerank_reciprocal_rank: reranked.map(|(rr, _)| rr),
                rerank_delta: reranked.map(|(_, delta)| delta),
            });
        };
        push(QueryKind::Context, None, &queries.context);
        push(QueryKind::Keywords, None, &queries.keywords);
        for (i, question) in queries.questions.iter().enumerate() {
            push(QueryKind::Question, Some(i + 1), question);
        }

        batches.push(BatchEval {
            queries,
            rerank: rerank_eval,
            retrieval_rr: queries
                .questions
                .iter()
                .map(|list| reciprocal_rank(list, target))
                .collect(),
        });
        records.push(ParagraphRecord {
            paragraph_id: datapoint.paragraph_id.clone(),
            target_id: target.clone(),
            queries: outcomes,
        });
    }

    let correlations = correlation_sweep(&batches, params, &rbo_params)?;
    Ok((records, correlations))
}

struct BatchEval<'a> {
    queries: &'a ParagraphQueries,
    rerank: Option<RerankEval>,
    retrieval_rr: Vec<f64>,
}

impl BatchEval<'_> {
    fn signal(&self, question_index: usize, signal: CorrelationSignal) -> f64 {
        let query = QueryRef::question(question_index + 1);
        match (signal, &self.rerank) {
            (CorrelationSignal::ReciprocalRank, Some(eval)) => eval.by_query[&query].0,
            (CorrelationSignal::ReciprocalRank, None) => self.retrieval_rr[question_index],
            (CorrelationSignal::RankDelta, Some(eval)) => eval.by_query[&query].1,
            (CorrelationSignal::RankDelta, None) => {
                unreachable!("validated: rank-delta requires rerank")
            }
        }
    }
}

fn apply_rerank(
    queries: &ParagraphQueries,
    target: &DocId,
    sets: Option<&BTreeMap<QueryRef, RerankScoreSet>>,
) -> Result<RerankEval, PipelineError> {
    let sets = sets.ok_or_else(|| {
        PipelineError::stage_msg(
            "rerank",
            format!("no rerank scores for paragraph {:?}", queries.paragraph_id),
        )
    })?;
    let candidates = &queries.context;
    let mut refs = vec![QueryRef::context(), QueryRef::keywords()];
    refs.extend((1..=queries.n_questions()).map(QueryRef::question));

    let mut reranked: BTreeMap<QueryRef, RankedList> = BTreeMap::new();
    for query in &refs {
        let set = sets.get(query).ok_or_else(|| {
            PipelineError::stage_msg(
                "rerank",
                format!(
                    "paragraph {:?} is missing rerank scores for {}",
                    queries.paragraph_id,
                    query.label()
                ),
            )
        })?;
        reranked.insert(
            *query,
            rerank(candidates, set).map_err(|e| PipelineError::stage("rerank", e))?,
        );
    }

    // The summary recomputes deltas from the same lists; it also validates
    // completeness one more time.
    let outcome = batch_rerank_summary(
        &queries.paragraph_id,
        candidates,
        target,
        queries.n_questions(),
        &reranked,
    )
    .map_err(|e| PipelineError::stage("rerank", e))?;

    let base_rr = reciprocal_rank(candidates, target);
    let mut by_query = BTreeMap::new();
    by_query.insert(
        QueryRef::context(),
        (base_rr + outcome.context_delta, outcome.context_delta),
    );
    by_query.insert(
        QueryRef::keywords(),
        (base_rr + outcome.keyword_delta, outcome.keyword_delta),
    );
    for (i, delta) in outcome.question_deltas.iter().enumerate() {
        let rr = reciprocal_rank(&reranked[&QueryRef::question(i + 1)], target);
        by_query.insert(QueryRef::question(i + 1), (rr, *delta));
    }
    Ok(RerankEval { by_query })
}

fn correlation_sweep(
    batches: &[BatchEval<'_>],
    params: &EvalParams,
    rbo_params: &RboParams,
) -> Result<Vec<CorrelationSummary>, PipelineError> {
    let mut counts = params.question_counts.clone();
    counts.sort_unstable();
    counts.dedup();
    let mut lambdas = params.lambda_sweep.clone();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lambdas.dedup();

    let mut summaries = Vec::new();
    for &n in &counts {
        for &lambda in &lambdas {
            let config = SelectionConfig::new(lambda, *rbo_params)
                .map_err(|e| PipelineError::config(e.to_string()))?;
            let mut pair_batches: Vec<Vec<(f64, f64)>> = Vec::new();
            for batch_eval in batches {
                let batch = match build_batch(batch_eval.queries, params.reference, None)?
                    .truncated(n)
                {
                    Some(batch) => batch,
                    // Batches smaller than the sweep size are left out of
                    // this row.
                    None => continue,
                };
                let mut mmr_by_index = vec![0.0f64; n];
                for (index, score) in rank_batch(&batch, &config) {
                    mmr_by_index[index] = score;
                }
                let pairs = (0..n)
                    .map(|i| (mmr_by_index[i], batch_eval.signal(i, params.signal)))
                    .collect();
                pair_batches.push(pairs);
            }
            if pair_batches.is_empty() {
                log::warn!("no batch has {n} questions; skipping correlation row");
                continue;
            }
            let mut summary = match batch_correlation_summary(&pair_batches, n, lambda) {
                Ok(summary) => summary,
                Err(StatsError::NoValidBatches) => {
                    log::warn!(
                        "every {n}-question batch degenerate at lambda {lambda}; skipping row"
                    );
                    continue;
                }
                Err(e) => return Err(PipelineError::stage("stats", e)),
            };
            match global_correlation(&pair_batches) {
                Ok((rho, p)) => {
                    summary.global_rho = Some(rho);
                    summary.global_p_value = Some(p);
                }
                Err(StatsError::ZeroVariance) => {
                    log::warn!("pooled correlation degenerate for n={n}, lambda={lambda}");
                }
                Err(e) => return Err(PipelineError::stage("stats", e)),
            }
            summaries.push(summary);
        }
    }
    Ok(summaries)
}

fn require_file(role: &str, path: &Path) -> Result<(), PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::config(format!(
            "{role} file {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn digest_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path)
        .map_err(|e| PipelineError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Runs search -> (rerank) -> select -> stats -> report over the configured
/// files. Inputs are validated before any compute; any stage error aborts
/// with the stage name and the offending record.
pub fn run_pipeline(config: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    // Fail on configuration problems before any compute.
    config.params.validate()?;
    require_file("embeddings", &config.embeddings)?;
    require_file("manifest", &config.manifest)?;
    require_file("queries", &config.queries)?;
    require_file("datapoints", &config.datapoints)?;
    if let Some(path) = &config.rerank_scores {
        require_file("rerank scores", path)?;
    }

    let mut input_digests = BTreeMap::new();
    input_digests.insert("embeddings".to_owned(), digest_file(&config.embeddings)?);
    input_digests.insert("manifest".to_owned(), digest_file(&config.manifest)?);
    input_digests.insert("queries".to_owned(), digest_file(&config.queries)?);
    input_digests.insert("datapoints".to_owned(), digest_file(&config.datapoints)?);
    if let Some(path) = &config.rerank_scores {
        input_digests.insert("rerank_scores".to_owned(), digest_file(path)?);
    }

    let open = |path: &Path| -> Result<std::io::BufReader<std::fs::File>, std::io::Error> {
        Ok(std::io::BufReader::new(std::fs::File::open(path)?))
    };

    let store = EmbeddingStore::ingest(
        open(&config.embeddings).map_err(|e| PipelineError::stage("ingest", e))?,
        open(&config.manifest).map_err(|e| PipelineError::stage("ingest", e))?,
    )
    .map_err(|e| PipelineError::stage("ingest", e))?;

    let queries = load_query_vectors(
        open(&config.queries).map_err(|e| PipelineError::stage("search", e))?,
    )
    .map_err(|e| PipelineError::stage("search", e))?;
    let results = batch_search(&store, &queries, config.params.k)
        .map_err(|e| PipelineError::stage("search", e))?;
    let groups = group_results(results)?;

    let datapoints = load_datapoints(
        open(&config.datapoints).map_err(|e| PipelineError::stage("select", e))?,
    )
    .map_err(|e| PipelineError::stage("select", e))?;

    let rerank_sets = match &config.rerank_scores {
        Some(path) => Some(
            load_rerank_scores(open(path).map_err(|e| PipelineError::stage("rerank", e))?)
                .map_err(|e| PipelineError::stage("rerank", e))?,
        ),
        None => None,
    };

    let inputs = EvalInputs {
        datapoints,
        groups,
        rerank_sets,
    };
    let (paragraphs, correlations) = evaluate(&inputs, &config.params)?;

    let aggregates = Aggregates::compute(
        &paragraphs,
        config.params.k,
        config.params.rbo_p,
        config.params.lambda,
        correlations,
        inputs.rerank_sets.is_some(),
    );

    let config_hash = hex::encode(Sha256::digest(
        serde_json::to_vec(config).map_err(|e| PipelineError::stage("report", e))?,
    ));
    Ok(EvalReport {
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash,
            input_digests,
            generated_at: chrono::Utc::now().to_rfc3339(),
        },
        paragraphs,
        aggregates,
    })
}
