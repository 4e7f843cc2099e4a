//! Ranked-list algebra: agreement counts, rank-biased overlap, reciprocal
//! rank, MRR, and hit ratio.
//!
//! A [`RankedList`] is an ordered, duplicate-free sequence of document ids
//! for one query, optionally carrying descending similarity scores, with a
//! fixed evaluation depth. All operations here are pure functions over
//! immutable lists.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::DocId;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("list {query_id:?} contains duplicate document id {id:?}")]
    DuplicateItem { query_id: String, id: DocId },
    #[error("list {query_id:?} has {items} items but {scores} scores")]
    ScoreLength {
        query_id: String,
        items: usize,
        scores: usize,
    },
    #[error("list {query_id:?} scores increase at position {position}")]
    ScoresNotDescending { query_id: String, position: usize },
    #[error("list {query_id:?} has {len} items, exceeding evaluation depth {depth_k}")]
    DepthExceeded {
        query_id: String,
        len: usize,
        depth_k: usize,
    },
    #[error("evaluation depth must be at least 1")]
    ZeroDepth,
    #[error("persistence parameter must lie in (0, 1), got {p}")]
    InvalidPersistence { p: f64 },
    #[error("no target document recorded for query {query_id:?}")]
    MissingTarget { query_id: String },
    #[error("at least one ranked list is required")]
    NoLists,
}

/// An ordered, duplicate-free ranking of document ids for a single query.
///
/// Lists shorter than `depth_k` are valid; operations treat the missing tail
/// as contributing no agreement. Deserialization goes through the same
/// validation as construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RankedListWire", into = "RankedListWire")]
pub struct RankedList {
    query_id: String,
    items: Vec<DocId>,
    scores: Option<Vec<f64>>,
    depth_k: usize,
}

#[derive(Serialize, Deserialize)]
struct RankedListWire {
    query_id: String,
    items: Vec<DocId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
    depth_k: usize,
}

impl TryFrom<RankedListWire> for RankedList {
    type Error = RankError;

    fn try_from(wire: RankedListWire) -> Result<Self, RankError> {
        Self::build(wire.query_id, wire.items, wire.scores, wire.depth_k)
    }
}

impl From<RankedList> for RankedListWire {
    fn from(list: RankedList) -> Self {
        Self {
            query_id: list.query_id,
            items: list.items,
            scores: list.scores,
            depth_k: list.depth_k,
        }
    }
}

impl RankedList {
    /// Builds a list without scores, validating the duplicate-free and depth
    /// invariants.
    pub fn new(
        query_id: impl Into<String>,
        items: Vec<DocId>,
        depth_k: usize,
    ) -> Result<Self, RankError> {
        Self::build(query_id.into(), items, None, depth_k)
    }

    /// Builds a list with a parallel, non-increasing score sequence.
    pub fn with_scores(
        query_id: impl Into<String>,
        items: Vec<DocId>,
        scores: Vec<f64>,
        depth_k: usize,
    ) -> Result<Self, RankError> {
        Self::build(query_id.into(), items, Some(scores), depth_k)
    }

    fn build(
        query_id: String,
        items: Vec<DocId>,
        scores: Option<Vec<f64>>,
        depth_k: usize,
    ) -> Result<Self, RankError> {
        if depth_k == 0 {
            return Err(RankError::ZeroDepth);
        }
        if items.len() > depth_k {
            return Err(RankError::DepthExceeded {
                query_id,
                len: items.len(),
                depth_k,
            });
        }
        let mut seen = HashSet::with_capacity(items.len());
        for id in &items {
            if !seen.insert(id) {
                return Err(RankError::DuplicateItem {
                    query_id,
                    id: id.clone(),
                });
            }
        }
        if let Some(scores) = &scores {
            if scores.len() != items.len() {
                return Err(RankError::ScoreLength {
                    query_id,
                    items: items.len(),
                    scores: scores.len(),
                });
            }
            for (i, pair) in scores.windows(2).enumerate() {
                if pair[1] > pair[0] {
                    return Err(RankError::ScoresNotDescending {
                        query_id,
                        position: i + 1,
                    });
                }
            }
        }
        Ok(Self {
            query_id,
            items,
            scores,
            depth_k,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn items(&self) -> &[DocId] {
        &self.items
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn depth_k(&self) -> usize {
        self.depth_k
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based position of `target`, or `None` when absent.
    pub fn rank_of(&self, target: &DocId) -> Option<usize> {
        self.items.iter().position(|id| id == target).map(|p| p + 1)
    }

    /// Whether `target` appears within the first `k` positions.
    pub fn hit_at(&self, target: &DocId, k: usize) -> bool {
        self.rank_of(target).is_some_and(|r| r <= k)
    }
}

/// Parameters for rank-biased overlap: persistence `p` in (0, 1) and
/// evaluation depth `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RboParams {
    p: f64,
    k: usize,
}

impl RboParams {
    pub fn new(p: f64, k: usize) -> Result<Self, RankError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(RankError::InvalidPersistence { p });
        }
        if k == 0 {
            return Err(RankError::ZeroDepth);
        }
        Ok(Self { p, k })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl Default for RboParams {
    /// p = 0.9 at depth 50, the evaluation setting used throughout.
    fn default() -> Self {
        Self { p: 0.9, k: 50 }
    }
}

/// Agreement count: size of the intersection of the first `d` items of each
/// list. Lists shorter than `d` contribute only the items they have.
pub fn overlap_at_depth(s: &RankedList, t: &RankedList, d: usize) -> usize {
    let take_s: HashSet<_> = s.items().iter().take(d).collect();
    t.items()
        .iter()
        .take(d)
        .filter(|id| take_s.contains(id))
        .count()
}

/// Rank-biased overlap of two rankings evaluated at depth `k`:
///
/// ```text
/// RBO(S, T, p, k) = (X_k / k) * p^k + ((1 - p) / p) * sum_{d=1..k} (X_d / d) * p^d
/// ```
///
/// where `X_d` is the agreement count at depth `d`. Symmetric in its list
/// arguments and bounded in [0, 1]; identical rankings of length >= k score
/// exactly 1 and disjoint rankings score 0.
pub fn rbo(s: &RankedList, t: &RankedList, params: &RboParams) -> f64 {
    let p = params.p();
    let k = params.k();
    let mut seen_s: HashSet<&DocId> = HashSet::with_capacity(k.min(s.len()));
    let mut seen_t: HashSet<&DocId> = HashSet::with_capacity(k.min(t.len()));
    let mut overlap = 0usize;
    let mut weighted_sum = 0.0;
    let mut p_pow = 1.0;
    for d in 1..=k {
        if let Some(a) = s.items().get(d - 1) {
            if seen_t.contains(a) {
                overlap += 1;
            }
            seen_s.insert(a);
        }
        if let Some(b) = t.items().get(d - 1) {
            if seen_s.contains(b) {
                overlap += 1;
            }
            seen_t.insert(b);
        }
        p_pow *= p;
        weighted_sum += overlap as f64 / d as f64 * p_pow;
    }
    let x_k = overlap as f64;
    x_k / k as f64 * p.powi(k as i32) + (1.0 - p) / p * weighted_sum
}

/// 1/rank of `target` in the list, or 0.0 when the target is absent.
pub fn reciprocal_rank(list: &RankedList, target: &DocId) -> f64 {
    match list.rank_of(target) {
        Some(rank) => 1.0 / rank as f64,
        None => 0.0,
    }
}

/// Mean reciprocal rank over a set of queries. Every list's query id must
/// have a target entry; a target absent from its list contributes 0.
pub fn mrr(lists: &[RankedList], targets: &HashMap<String, DocId>) -> Result<f64, RankError> {
    if lists.is_empty() {
        return Err(RankError::NoLists);
    }
    let mut sum = 0.0;
    for list in lists {
        let target = targets
            .get(list.query_id())
            .ok_or_else(|| RankError::MissingTarget {
                query_id: list.query_id().to_owned(),
            })?;
        sum += reciprocal_rank(list, target);
    }
    Ok(sum / lists.len() as f64)
}

/// Fraction of lists whose first `k` items contain their target.
pub fn hit_ratio(
    lists: &[RankedList],
    targets: &HashMap<String, DocId>,
    k: usize,
) -> Result<f64, RankError> {
    if lists.is_empty() {
        return Err(RankError::NoLists);
    }
    let mut hits = 0usize;
    for list in lists {
        let target = targets
            .get(list.query_id())
            .ok_or_else(|| RankError::MissingTarget {
                query_id: list.query_id().to_owned(),
            })?;
        if list.hit_at(target, k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / lists.len() as f64)
}
