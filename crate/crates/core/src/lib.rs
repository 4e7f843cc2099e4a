//! Evaluation machinery for question-based scientific document retrieval.
//!
//! The library covers the full desk-scale pipeline: building citation-masked
//! datapoints from structured article XML, exact top-k search over ingested
//! embedding vectors, applying externally computed reranker scores, scoring
//! question queries with MMR-RBO, and aggregating rank/correlation metrics
//! into a report.
//!
//! Modules:
//! - [`ranked_lists`] — ranked-list algebra: overlap, RBO, reciprocal rank,
//!   MRR, hit ratio.
//! - [`selection`] — per-batch question scoring (`sim_q`, `sim_d`, MMR-RBO)
//!   and in-batch ranking.
//! - [`stats`] — Spearman correlation with significance, the Fisher
//!   transformation, and per-batch/global aggregation.
//! - [`retrieval`] — embedding ingestion and exact top-k cosine search.
//! - [`rerank`] — reordering candidate sets by external scores and measuring
//!   rank movement.
//! - [`corpus`] — TEI-style XML parsing, citation masking, and
//!   single-citation candidate filtering.
//! - [`llm`] — chat-completion client with caching, question/keyword
//!   generation, and probability-weighted relevance scoring.
//! - [`report`] — the evaluation report and plot-table emission.
//! - [`pipeline`] — stage orchestration over the documented file formats.

pub mod corpus;
pub mod llm;
pub mod pipeline;
pub mod ranked_lists;
pub mod report;
pub mod rerank;
pub mod retrieval;
pub mod selection;
pub mod stats;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a document in the retrieval corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub String);

impl DocId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DocId {
    fn from(id: &str) -> Self {
        Self(id.to_owned())
    }
}

impl From<String> for DocId {
    fn from(id: String) -> Self {
        Self(id)
    }
}
