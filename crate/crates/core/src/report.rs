//! The evaluation report: per-paragraph query outcomes, recomputable
//! aggregates, provenance, and plot-ready table emission.
//!
//! Plot tables are plain TSV: one header line, one row per point, suitable
//! for any plotting tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rerank::QueryKind;
use crate::stats::CorrelationSummary;
use crate::DocId;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report (de)serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report has no data for figure {figure:?} (stage not run)")]
    UnavailableData { figure: String },
    #[error("unknown figure {name:?}; expected one of hit_ratio, rbo_ranked, mrr_rerank, correlation")]
    UnknownFigure { name: String },
}

/// Outcome of one query (context, keywords, or a question) for one
/// paragraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub kind: QueryKind,
    /// 1-based generation order; present only for questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_index: Option<usize>,
    /// Whether the target appeared in the top-k retrieval results.
    pub hit: bool,
    pub reciprocal_rank: f64,
    /// RBO between this question's results and the context query's results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rbo_vs_context: Option<f64>,
    /// MMR-RBO at the report's headline lambda; questions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmr_rbo: Option<f64>,
    /// Reciprocal rank of the target after reranking by this query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_reciprocal_rank: Option<f64>,
    /// Reranked minus retrieved reciprocal rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParagraphRecord {
    pub paragraph_id: String,
    pub target_id: DocId,
    pub queries: Vec<QueryOutcome>,
}

/// Aggregate metrics, all recomputable from the per-paragraph records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub k: usize,
    pub rbo_p: f64,
    pub lambda: f64,
    /// MRR per query kind; questions appear pooled over every question
    /// query and as the per-batch best.
    pub mrr: BTreeMap<String, f64>,
    pub hit_ratio: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank: Option<RerankAggregates>,
    pub correlations: Vec<CorrelationSummary>,
}

/// Rank-movement aggregates per reranker query kind. For the question kind
/// the mean averages per-paragraph means and min/max are the envelope of
/// the per-paragraph wicks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankAggregates {
    pub mean_delta: BTreeMap<String, f64>,
    pub min_delta: BTreeMap<String, f64>,
    pub max_delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    /// Digest per input file role.
    pub input_digests: BTreeMap<String, String>,
    pub generated_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub paragraphs: Vec<ParagraphRecord>,
    pub aggregates: Aggregates,
}

pub const QUESTION_POOLED: &str = "question_pooled";
pub const QUESTION_BEST: &str = "question_best";

impl Aggregates {
    /// Computes every aggregate from per-paragraph records. The report
    /// stores exactly this, so stored aggregates can always be checked by
    /// recomputation.
    pub fn compute(
        paragraphs: &[ParagraphRecord],
        k: usize,
        rbo_p: f64,
        lambda: f64,
        correlations: Vec<CorrelationSummary>,
        include_rerank: bool,
    ) -> Self {
        let mut mrr_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut hit_sums: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut add = |label: &str, rr: f64, hit: bool| {
            let m = mrr_sums.entry(label.to_owned()).or_insert((0.0, 0));
            m.0 += rr;
            m.1 += 1;
            let h = hit_sums.entry(label.to_owned()).or_insert((0, 0));
            h.0 += usize::from(hit);
            h.1 += 1;
        };

        for paragraph in paragraphs {
            let mut best_rr = 0.0f64;
            let mut best_hit = false;
            let mut saw_question = false;
            for query in &paragraph.queries {
                match query.kind {
                    QueryKind::Context => add("context", query.reciprocal_rank, query.hit),
                    QueryKind::Keywords => add("keywords", query.reciprocal_rank, query.hit),
                    QueryKind::Question => {
                        saw_question = true;
                        add(QUESTION_POOLED, query.reciprocal_rank, query.hit);
                        best_rr = best_rr.max(query.reciprocal_rank);
                        best_hit |= query.hit;
                    }
                }
            }
            if saw_question {
                add(QUESTION_BEST, best_rr, best_hit);
            }
        }

        let mrr = mrr_sums
            .into_iter()
            .map(|(label, (sum, n))| (label, sum / n as f64))
            .collect();
        let hit_ratio = hit_sums
            .into_iter()
            .map(|(label, (hits, n))| (label, hits as f64 / n as f64))
            .collect();

        let rerank = include_rerank.then(|| Self::compute_rerank(paragraphs));

        Self {
            k,
            rbo_p,
            lambda,
            mrr,
            hit_ratio,
            rerank,
            correlations,
        }
    }

    fn compute_rerank(paragraphs: &[ParagraphRecord]) -> RerankAggregates {
        #[derive(Default)]
        struct Acc {
            sum: f64,
            n: usize,
            min: f64,
            max: f64,
        }
        impl Acc {
            fn push(&mut self, value: f64) {
                if self.n == 0 {
                    self.min = value;
                    self.max = value;
                } else {
                    self.min = self.min.min(value);
                    self.max = self.max.max(value);
                }
                self.sum += value;
                self.n += 1;
            }
        }

        let mut accs: BTreeMap<String, Acc> = BTreeMap::new();
        for paragraph in paragraphs {
            let mut question_deltas: Vec<f64> = Vec::new();
            for query in &paragraph.queries {
                let Some(delta) = query.rerank_delta else {
                    continue;
                };
                match query.kind {
                    QueryKind::Context => accs.entry("context".to_owned()).or_default().push(delta),
                    QueryKind::Keywords => {
                        accs.entry("keywords".to_owned()).or_default().push(delta)
                    }
                    QueryKind::Question => question_deltas.push(delta),
                }
            }
            if !question_deltas.is_empty() {
                let mean = question_deltas.iter().sum::<f64>() / question_deltas.len() as f64;
                let acc = accs.entry("question".to_owned()).or_default();
                // Per-paragraph mean feeds the bar; per-paragraph extremes
                // feed the envelope.
                let min = question_deltas.iter().copied().fold(f64::INFINITY, f64::min);
                let max = question_deltas
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                if acc.n == 0 {
                    acc.min = min;
                    acc.max = max;
                } else {
                    acc.min = acc.min.min(min);
                    acc.max = acc.max.max(max);
                }
                acc.sum += mean;
                acc.n += 1;
            }
        }

        let mut aggregates = RerankAggregates {
            mean_delta: BTreeMap::new(),
            min_delta: BTreeMap::new(),
            max_delta: BTreeMap::new(),
        };
        for (label, acc) in accs {
            aggregates
                .mean_delta
                .insert(label.clone(), acc.sum / acc.n as f64);
            aggregates.min_delta.insert(label.clone(), acc.min);
            aggregates.max_delta.insert(label, acc.max);
        }
        aggregates
    }
}

/// The figures the report can emit plot tables for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    HitRatio,
    RboRanked,
    MrrRerank,
    Correlation,
}

impl Figure {
    pub const ALL: [Figure; 4] = [
        Figure::HitRatio,
        Figure::RboRanked,
        Figure::MrrRerank,
        Figure::Correlation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Figure::HitRatio => "hit_ratio",
            Figure::RboRanked => "rbo_ranked",
            Figure::MrrRerank => "mrr_rerank",
            Figure::Correlation => "correlation",
        }
    }
}

impl FromStr for Figure {
    type Err = ReportError;

    fn from_str(name: &str) -> Result<Self, Self::Err> {
        match name {
            "hit_ratio" => Ok(Figure::HitRatio),
            "rbo_ranked" => Ok(Figure::RboRanked),
            "mrr_rerank" => Ok(Figure::MrrRerank),
            "correlation" => Ok(Figure::Correlation),
            other => Err(ReportError::UnknownFigure {
                name: other.to_owned(),
            }),
        }
    }
}

fn fmt_lambda(lambda: f64) -> String {
    // One decimal matches the swept values; fall back to full precision for
    // anything finer.
    if (lambda * 10.0).fract().abs() < 1e-9 {
        format!("{lambda:.1}")
    } else {
        format!("{lambda}")
    }
}

/// Renders one figure's underlying data as a TSV table.
pub fn emit_plot_data(
    report: &EvalReport,
    figure: Figure,
    mut sink: impl Write,
) -> Result<(), ReportError> {
    let table = render_plot_data(report, figure)?;
    sink.write_all(table.as_bytes())?;
    Ok(())
}

/// Same as [`emit_plot_data`] but returns the table as a string.
pub fn render_plot_data(report: &EvalReport, figure: Figure) -> Result<String, ReportError> {
    let mut out = String::new();
    match figure {
        Figure::HitRatio => {
            out.push_str("query_kind\thit_ratio\n");
            for (label, value) in &report.aggregates.hit_ratio {
                writeln!(out, "{label}\t{value:.4}").unwrap();
            }
        }
        Figure::RboRanked => {
            out.push_str("paragraph_id\tquestion_index\trbo_vs_context\treciprocal_rank\thit\n");
            for paragraph in &report.paragraphs {
                let mut rows: Vec<&QueryOutcome> = paragraph
                    .queries
                    .iter()
                    .filter(|q| q.kind == QueryKind::Question && q.rbo_vs_context.is_some())
                    .collect();
                // Questions sorted by similarity to the context results,
                // most similar first.
                rows.sort_by(|a, b| {
                    b.rbo_vs_context
                        .partial_cmp(&a.rbo_vs_context)
                        .unwrap()
                        .then(a.question_index.cmp(&b.question_index))
                });
                for row in rows {
                    writeln!(
                        out,
                        "{}\t{}\t{:.4}\t{:.4}\t{}",
                        paragraph.paragraph_id,
                        row.question_index.unwrap_or_default(),
                        row.rbo_vs_context.unwrap(),
                        row.reciprocal_rank,
                        u8::from(row.hit),
                    )
                    .unwrap();
                }
            }
        }
        Figure::MrrRerank => {
            let rerank =
                report
                    .aggregates
                    .rerank
                    .as_ref()
                    .ok_or_else(|| ReportError::UnavailableData {
                        figure: figure.name().to_owned(),
                    })?;
            out.push_str("query_kind\tmean_delta\tmin_delta\tmax_delta\n");
            for (label, mean) in &rerank.mean_delta {
                writeln!(
                    out,
                    "{label}\t{mean:.4}\t{:.4}\t{:.4}",
                    rerank.min_delta[label], rerank.max_delta[label]
                )
                .unwrap();
            }
        }
        Figure::Correlation => {
            if report.aggregates.correlations.is_empty() {
                return Err(ReportError::UnavailableData {
                    figure: figure.name().to_owned(),
                });
            }
            out.push_str(&render_correlation_table(&report.aggregates.correlations));
        }
    }
    Ok(out)
}

/// Correlation rows as a TSV table: one row per (questions, lambda)
/// configuration, then the pooled rows with `*` in the batch-ratio column.
pub fn render_correlation_table(rows: &[CorrelationSummary]) -> String {
    let mut out = String::from("questions\tlambda\tbatch_ratio\trho\n");
    for row in rows {
        writeln!(
            out,
            "{}\t{}\t{:.4}\t{:.4}",
            row.n_questions,
            fmt_lambda(row.lambda),
            row.batch_ratio,
            row.mean_fisher_rho
        )
        .unwrap();
    }
    for row in rows {
        if let Some(global_rho) = row.global_rho {
            writeln!(
                out,
                "{}\t{}\t*\t{global_rho:.4}",
                row.n_questions,
                fmt_lambda(row.lambda),
            )
            .unwrap();
        }
    }
    out
}

/// Writes the report as pretty-printed JSON.
pub fn save_report(report: &EvalReport, mut sink: impl Write) -> Result<(), ReportError> {
    serde_json::to_writer_pretty(&mut sink, report)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn load_report(source: impl std::io::Read) -> Result<EvalReport, ReportError> {
    Ok(serde_json::from_reader(source)?)
}
