//! Reordering retrieved candidate sets by externally computed scores and
//! measuring the resulting rank movement of the target document.
//!
//! Cross-encoder scores are ingested, never computed here: any external
//! scorer (or a test stub) participates through the score file format. Ties
//! keep the original retrieved order, so reranking is a stable refinement of
//! retrieval.
//!
//! # File format
//!
//! Rerank scores: one JSON record per line,
//! `{"paragraph_id": ..., "query_kind": "context" | "keywords" | "question",
//!   "question_index": <1-based, questions only>, "doc_id": ..., "score": <real>}`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranked_lists::{reciprocal_rank, RankedList};
use crate::DocId;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("score file line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("non-finite score for document {id:?} in {paragraph_id:?}")]
    NonFiniteScore { paragraph_id: String, id: DocId },
    #[error("duplicate score for document {id:?} under the same query")]
    DuplicateScore { id: DocId },
    #[error("question_index must be present exactly for question queries")]
    BadQuestionIndex,
    #[error("candidates without scores: {ids:?}")]
    MissingScores { ids: Vec<DocId> },
    #[error("scored documents not in the candidate list: {ids:?}")]
    UnknownScoredIds { ids: Vec<DocId> },
    #[error("lists rank different document sets")]
    IdSetMismatch,
    #[error("paragraph {paragraph_id:?} is missing a reranked list for {query:?}")]
    MissingList { paragraph_id: String, query: String },
    #[error("paragraph {paragraph_id:?} has no question queries")]
    NoQuestions { paragraph_id: String },
}

/// Which query produced (or reranks) a result set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Context,
    Keywords,
    Question,
}

impl QueryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryKind::Context => "context",
            QueryKind::Keywords => "keywords",
            QueryKind::Question => "question",
        }
    }
}

/// Key identifying one reranker query within a paragraph: the query kind
/// plus the 1-based question index for question queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryRef {
    pub kind: QueryKind,
    pub question_index: Option<usize>,
}

impl QueryRef {
    pub fn context() -> Self {
        Self {
            kind: QueryKind::Context,
            question_index: None,
        }
    }

    pub fn keywords() -> Self {
        Self {
            kind: QueryKind::Keywords,
            question_index: None,
        }
    }

    /// `index` is 1-based generation order.
    pub fn question(index: usize) -> Self {
        Self {
            kind: QueryKind::Question,
            question_index: Some(index),
        }
    }

    fn validate(&self) -> Result<(), RerankError> {
        match (self.kind, self.question_index) {
            (QueryKind::Question, Some(i)) if i >= 1 => Ok(()),
            (QueryKind::Context | QueryKind::Keywords, None) => Ok(()),
            _ => Err(RerankError::BadQuestionIndex),
        }
    }

    pub fn label(&self) -> String {
        match self.question_index {
            Some(i) => format!("{}#{i}", self.kind.as_str()),
            None => self.kind.as_str().to_owned(),
        }
    }
}

/// Externally computed scores for one (paragraph, reranker query) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankScoreSet {
    paragraph_id: String,
    query: QueryRef,
    entries: HashMap<DocId, f64>,
}

impl RerankScoreSet {
    pub fn new(
        paragraph_id: impl Into<String>,
        query: QueryRef,
        entries: HashMap<DocId, f64>,
    ) -> Result<Self, RerankError> {
        let paragraph_id = paragraph_id.into();
        query.validate()?;
        for (id, score) in &entries {
            if !score.is_finite() {
                return Err(RerankError::NonFiniteScore {
                    paragraph_id,
                    id: id.clone(),
                });
            }
        }
        Ok(Self {
            paragraph_id,
            query,
            entries,
        })
    }

    pub fn paragraph_id(&self) -> &str {
        &self.paragraph_id
    }

    pub fn query(&self) -> QueryRef {
        self.query
    }

    pub fn entries(&self) -> &HashMap<DocId, f64> {
        &self.entries
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRecord {
    paragraph_id: String,
    query_kind: QueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question_index: Option<usize>,
    doc_id: DocId,
    score: f64,
}

/// Reads the line-oriented score file, grouping records into one
/// [`RerankScoreSet`] per (paragraph, query). Output order is deterministic:
/// sorted by paragraph id, then query.
pub fn load_rerank_scores(source: impl BufRead) -> Result<Vec<RerankScoreSet>, RerankError> {
    let mut grouped: BTreeMap<(String, QueryRef), HashMap<DocId, f64>> = BTreeMap::new();
    for (line_no, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord =
            serde_json::from_str(&line).map_err(|source| RerankError::Parse {
                line: line_no + 1,
                source,
            })?;
        let query = QueryRef {
            kind: record.query_kind,
            question_index: record.question_index,
        };
        query.validate()?;
        if !record.score.is_finite() {
            return Err(RerankError::NonFiniteScore {
                paragraph_id: record.paragraph_id,
                id: record.doc_id,
            });
        }
        let entries = grouped.entry((record.paragraph_id, query)).or_default();
        if entries.insert(record.doc_id.clone(), record.score).is_some() {
            return Err(RerankError::DuplicateScore { id: record.doc_id });
        }
    }
    grouped
        .into_iter()
        .map(|((paragraph_id, query), entries)| RerankScoreSet::new(paragraph_id, query, entries))
        .collect()
}

/// Writes score records in the line-oriented format.
pub fn write_rerank_scores(
    mut sink: impl Write,
    records: impl IntoIterator<Item = (String, QueryRef, DocId, f64)>,
) -> Result<(), RerankError> {
    for (paragraph_id, query, doc_id, score) in records {
        let record = ScoreRecord {
            paragraph_id,
            query_kind: query.kind,
            question_index: query.question_index,
            doc_id,
            score,
        };
        serde_json::to_writer(&mut sink, &record).map_err(std::io::Error::other)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Reorders the candidate list by score, descending; equal scores keep the
/// original retrieved order. The score set must cover the candidates exactly.
pub fn rerank(candidates: &RankedList, scores: &RerankScoreSet) -> Result<RankedList, RerankError> {
    let missing: Vec<DocId> = candidates
        .items()
        .iter()
        .filter(|id| !scores.entries().contains_key(*id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(RerankError::MissingScores { ids: missing });
    }
    if scores.entries().len() != candidates.len() {
        let mut unknown: Vec<DocId> = scores
            .entries()
            .keys()
            .filter(|id| !candidates.items().contains(id))
            .cloned()
            .collect();
        unknown.sort();
        return Err(RerankError::UnknownScoredIds { ids: unknown });
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = scores.entries()[&candidates.items()[a]];
        let sb = scores.entries()[&candidates.items()[b]];
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    let items: Vec<DocId> = order
        .iter()
        .map(|&i| candidates.items()[i].clone())
        .collect();
    let ordered_scores: Vec<f64> = items.iter().map(|id| scores.entries()[id]).collect();
    Ok(
        RankedList::with_scores(candidates.query_id(), items, ordered_scores, candidates.depth_k())
            .expect("reordering preserves ranked-list invariants"),
    )
}

/// Change in the target's reciprocal rank from `original` to `reranked`.
/// Both lists must rank the same documents; a target absent from both
/// contributes 0 on each side.
pub fn mrr_delta(
    original: &RankedList,
    reranked: &RankedList,
    target: &DocId,
) -> Result<f64, RerankError> {
    if original.len() != reranked.len() {
        return Err(RerankError::IdSetMismatch);
    }
    let original_set: std::collections::HashSet<&DocId> = original.items().iter().collect();
    if !reranked.items().iter().all(|id| original_set.contains(id)) {
        return Err(RerankError::IdSetMismatch);
    }
    Ok(reciprocal_rank(reranked, target) - reciprocal_rank(original, target))
}

/// Per-paragraph rank-movement summary across reranker queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub paragraph_id: String,
    pub context_delta: f64,
    pub keyword_delta: f64,
    /// Delta per question, in ascending question order.
    pub question_deltas: Vec<f64>,
    pub mean_question_delta: f64,
    pub min_question_delta: f64,
    pub max_question_delta: f64,
}

/// Computes `mrr_delta` for the context, keyword, and every question
/// reranker query over the same retrieved candidate set, and summarizes the
/// question deltas (mean plus the min/max "wicks").
pub fn batch_rerank_summary(
    paragraph_id: &str,
    original: &RankedList,
    target: &DocId,
    n_questions: usize,
    reranked: &BTreeMap<QueryRef, RankedList>,
) -> Result<RerankOutcome, RerankError> {
    if n_questions == 0 {
        return Err(RerankError::NoQuestions {
            paragraph_id: paragraph_id.to_owned(),
        });
    }
    let lookup = |query: QueryRef| -> Result<&RankedList, RerankError> {
        reranked.get(&query).ok_or_else(|| RerankError::MissingList {
            paragraph_id: paragraph_id.to_owned(),
            query: query.label(),
        })
    };
    let context_delta = mrr_delta(original, lookup(QueryRef::context())?, target)?;
    let keyword_delta = mrr_delta(original, lookup(QueryRef::keywords())?, target)?;
    let mut question_deltas = Vec::with_capacity(n_questions);
    for index in 1..=n_questions {
        question_deltas.push(mrr_delta(original, lookup(QueryRef::question(index))?, target)?);
    }
    let mean = question_deltas.iter().sum::<f64>() / question_deltas.len() as f64;
    let min = question_deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = question_deltas
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RerankOutcome {
        paragraph_id: paragraph_id.to_owned(),
        context_delta,
        keyword_delta,
        question_deltas,
        mean_question_delta: mean,
        min_question_delta: min,
        max_question_delta: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn candidates(ids: &[&str]) -> RankedList {
        let scores: Vec<f64> = (0..ids.len()).map(|i| 1.0 - i as f64 * 0.1).collect();
        RankedList::with_scores(
            "p::context",
            ids.iter().map(|s| DocId::from(*s)).collect(),
            scores,
            50,
        )
        .unwrap()
    }

    fn score_set(pairs: &[(&str, f64)]) -> RerankScoreSet {
        RerankScoreSet::new(
            "p",
            QueryRef::context(),
            pairs
                .iter()
                .map(|(id, s)| (DocId::from(*id), *s))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rerank_with_retrieval_scores_is_identity() {
        let list = candidates(&["a", "b", "c"]);
        let scores = score_set(&[("a", 1.0), ("b", 0.9), ("c", 0.8)]);
        let reranked = rerank(&list, &scores).unwrap();
        assert_eq!(reranked.items(), list.items());
    }

    #[test]
    fn rerank_reverses_with_reversed_scores() {
        let list = candidates(&["a", "b", "c"]);
        let scores = score_set(&[("a", 0.1), ("b", 0.2), ("c", 0.3)]);
        let reranked = rerank(&list, &scores).unwrap();
        assert_eq!(
            reranked.items(),
            &[DocId::from("c"), DocId::from("b"), DocId::from("a")]
        );
    }

    #[test]
    fn rerank_ties_keep_retrieved_order() {
        let list = candidates(&["b", "a", "c"]);
        let scores = score_set(&[("a", 0.5), ("b", 0.5), ("c", 0.5)]);
        let reranked = rerank(&list, &scores).unwrap();
        assert_eq!(reranked.items(), list.items());
    }

    #[test]
    fn rerank_reports_missing_ids() {
        let list = candidates(&["a", "b", "c"]);
        let scores = score_set(&[("a", 0.5)]);
        match rerank(&list, &scores).unwrap_err() {
            RerankError::MissingScores { ids } => {
                assert_eq!(ids, vec![DocId::from("b"), DocId::from("c")]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rerank_rejects_scores_outside_candidates() {
        let list = candidates(&["a", "b"]);
        let scores = score_set(&[("a", 0.5), ("b", 0.4), ("z", 0.9)]);
        assert!(matches!(
            rerank(&list, &scores).unwrap_err(),
            RerankError::UnknownScoredIds { .. }
        ));
    }

    #[test]
    fn mrr_delta_examples() {
        let original = candidates(&["x1", "x2", "x3", "x4", "t"]);
        // Target moves rank 5 -> rank 1.
        let promoted = score_set(&[("t", 9.0), ("x1", 4.0), ("x2", 3.0), ("x3", 2.0), ("x4", 1.0)]);
        let reranked = rerank(&original, &promoted).unwrap();
        let delta = mrr_delta(&original, &reranked, &DocId::from("t")).unwrap();
        assert!((delta - 0.8).abs() < 1e-15);

        assert_eq!(
            mrr_delta(&original, &original, &DocId::from("t")).unwrap(),
            0.0
        );
        // Absent from both sides.
        assert_eq!(
            mrr_delta(&original, &reranked, &DocId::from("zz")).unwrap(),
            0.0
        );
    }

    #[test]
    fn mrr_delta_rejects_different_id_sets() {
        let a = candidates(&["a", "b"]);
        let b = candidates(&["a", "c"]);
        assert!(matches!(
            mrr_delta(&a, &b, &DocId::from("a")),
            Err(RerankError::IdSetMismatch)
        ));
    }

    fn outcome_fixture(question_scores: &[Vec<(&str, f64)>]) -> RerankOutcome {
        let original = candidates(&["x1", "t", "x2"]);
        let target = DocId::from("t");
        let mut reranked = BTreeMap::new();
        let identity = &[("x1", 3.0), ("t", 2.0), ("x2", 1.0)];
        reranked.insert(
            QueryRef::context(),
            rerank(&original, &score_set(identity)).unwrap(),
        );
        reranked.insert(
            QueryRef::keywords(),
            rerank(&original, &score_set(identity)).unwrap(),
        );
        for (i, scores) in question_scores.iter().enumerate() {
            reranked.insert(
                QueryRef::question(i + 1),
                rerank(&original, &score_set(scores)).unwrap(),
            );
        }
        batch_rerank_summary(
            "p",
            &original,
            &target,
            question_scores.len(),
            &reranked,
        )
        .unwrap()
    }

    #[test]
    fn summary_identical_deltas_collapse() {
        let identity = vec![("x1", 3.0), ("t", 2.0), ("x2", 1.0)];
        let outcome = outcome_fixture(&[identity.clone(), identity.clone(), identity]);
        assert_eq!(outcome.mean_question_delta, 0.0);
        assert_eq!(outcome.min_question_delta, 0.0);
        assert_eq!(outcome.max_question_delta, 0.0);
    }

    #[test]
    fn summary_min_mean_max() {
        // Question 1 demotes the target rank 2 -> 3 (delta -1/6);
        // question 2 promotes it rank 2 -> 1 (delta +1/2).
        let demote = vec![("x1", 3.0), ("x2", 2.0), ("t", 1.0)];
        let promote = vec![("t", 3.0), ("x1", 2.0), ("x2", 1.0)];
        let outcome = outcome_fixture(&[demote, promote]);
        assert!((outcome.min_question_delta - (1.0 / 3.0 - 0.5)).abs() < 1e-15);
        assert!((outcome.max_question_delta - 0.5).abs() < 1e-15);
        let expected_mean =
            (outcome.question_deltas[0] + outcome.question_deltas[1]) / 2.0;
        assert!((outcome.mean_question_delta - expected_mean).abs() < 1e-15);
        assert!(outcome.min_question_delta <= outcome.mean_question_delta);
        assert!(outcome.mean_question_delta <= outcome.max_question_delta);
    }

    #[test]
    fn summary_requires_every_list() {
        let original = candidates(&["a", "t"]);
        let reranked = BTreeMap::new();
        let err = batch_rerank_summary("p9", &original, &DocId::from("t"), 1, &reranked)
            .unwrap_err();
        match err {
            RerankError::MissingList {
                paragraph_id,
                query,
            } => {
                assert_eq!(paragraph_id, "p9");
                assert_eq!(query, "context");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn score_file_round_trip_and_grouping() {
        let mut buffer = Vec::new();
        write_rerank_scores(
            &mut buffer,
            vec![
                ("p1".to_owned(), QueryRef::context(), DocId::from("a"), 1.0),
                ("p1".to_owned(), QueryRef::context(), DocId::from("b"), 0.5),
                ("p1".to_owned(), QueryRef::question(2), DocId::from("a"), 0.25),
            ],
        )
        .unwrap();
        let sets = load_rerank_scores(buffer.as_slice()).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].query(), QueryRef::context());
        assert_eq!(sets[0].entries().len(), 2);
        assert_eq!(sets[1].query(), QueryRef::question(2));
    }

    #[test]
    fn score_file_rejects_bad_records() {
        let bad_index = b"{\"paragraph_id\":\"p\",\"query_kind\":\"context\",\"question_index\":1,\"doc_id\":\"a\",\"score\":1.0}\n";
        assert!(matches!(
            load_rerank_scores(&bad_index[..]).unwrap_err(),
            RerankError::BadQuestionIndex
        ));
        let dup = b"{\"paragraph_id\":\"p\",\"query_kind\":\"context\",\"doc_id\":\"a\",\"score\":1.0}\n{\"paragraph_id\":\"p\",\"query_kind\":\"context\",\"doc_id\":\"a\",\"score\":2.0}\n";
        assert!(matches!(
            load_rerank_scores(&dup[..]).unwrap_err(),
            RerankError::DuplicateScore { .. }
        ));
    }

    fn arb_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn rerank_preserves_id_multiset(values in arb_scores(8)) {
            let ids: Vec<String> = (0..8).map(|i| format!("d{i}")).collect();
            let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let list = candidates(&id_refs);
            let pairs: Vec<(&str, f64)> = id_refs.iter().copied().zip(values.iter().copied()).collect();
            let reranked = rerank(&list, &score_set(&pairs)).unwrap();
            let mut got: Vec<&DocId> = reranked.items().iter().collect();
            let mut want: Vec<&DocId> = list.items().iter().collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn rerank_matches_stable_sort_oracle(values in arb_scores(8)) {
            let ids: Vec<String> = (0..8).map(|i| format!("d{i}")).collect();
            let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let list = candidates(&id_refs);
            let pairs: Vec<(&str, f64)> = id_refs.iter().copied().zip(values.iter().copied()).collect();
            let reranked = rerank(&list, &score_set(&pairs)).unwrap();
            // Oracle: stable sort of (original position, score) by descending
            // score; stability provides the retrieved-rank tie-break.
            let mut oracle: Vec<(usize, f64)> =
                values.iter().copied().enumerate().collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expected: Vec<DocId> = oracle
                .iter()
                .map(|(i, _)| list.items()[*i].clone())
                .collect();
            prop_assert_eq!(reranked.items(), expected.as_slice());
        }

        #[test]
        fn rerank_invariant_under_monotone_transform(values in arb_scores(8)) {
            let ids: Vec<String> = (0..8).map(|i| format!("d{i}")).collect();
            let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let list = candidates(&id_refs);
            let pairs: Vec<(&str, f64)> =
                id_refs.iter().copied().zip(values.iter().copied()).collect();
            let transformed: Vec<(&str, f64)> = pairs
                .iter()
                .map(|(id, s)| (*id, s * 3.0 + 100.0))
                .collect();
            let a = rerank(&list, &score_set(&pairs)).unwrap();
            let b = rerank(&list, &score_set(&transformed)).unwrap();
            prop_assert_eq!(a.items(), b.items());
        }
    }
}
