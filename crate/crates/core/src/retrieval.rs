//! Embedding ingestion and exact top-k similarity search.
//!
//! The store holds unit-normalized document vectors, so inner product equals
//! cosine similarity. Search is an exact full scan: at the corpus sizes this
//! toolkit targets (tens of thousands of documents) a blocked scan is fast
//! enough and keeps every downstream metric deterministic. Ties break on the
//! lexicographically smaller document id so results are reproducible across
//! platforms and thread counts.
//!
//! # File formats
//!
//! Embedding matrix: magic bytes `EMB1`, then `dim: u32 LE`, `count: u32 LE`,
//! then `count * dim` IEEE-754 `f32 LE` values, row-major.
//!
//! Manifest: one JSON record per line, `{"row": <integer>, "id": <string>}`;
//! rows must cover `0..count` exactly once and ids must be unique.
//!
//! Query vectors: one JSON record per line,
//! `{"query_id": <string>, "vector": [<real>, ...]}`.

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranked_lists::RankedList;
use crate::DocId;

const MAGIC: &[u8; 4] = b"EMB1";

/// Rows with an L2 norm below this are rejected at ingestion.
const MIN_NORM: f64 = 1e-12;

/// Row-block size for the parallel scan.
const SCAN_BLOCK_ROWS: usize = 1024;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes: expected \"EMB1\"")]
    BadMagic,
    #[error("embedding matrix truncated: expected {expected} bytes of vector data, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("row {row} has near-zero norm and cannot be normalized")]
    ZeroVector { row: usize },
    #[error("manifest has {manifest} rows but matrix declares {matrix}")]
    ManifestCount { manifest: usize, matrix: usize },
    #[error("manifest row index {row} appears more than once")]
    DuplicateRow { row: usize },
    #[error("manifest row index {row} out of range for {count} vectors")]
    RowOutOfRange { row: usize, count: usize },
    #[error("manifest id {id:?} appears more than once")]
    DuplicateId { id: DocId },
    #[error("manifest line {line}: {source}")]
    ManifestParse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("query file line {line}: {source}")]
    QueryParse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("query {query_id:?} has dimension {actual}, store has {expected}")]
    DimensionMismatch {
        query_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("query {query_id:?} contains a non-finite value")]
    NonFiniteQuery { query_id: String },
    #[error("query {query_id:?} has near-zero norm")]
    ZeroQuery { query_id: String },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    row: usize,
    id: DocId,
}

/// Immutable matrix of unit-normalized document vectors with a
/// row <-> document-id manifest.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<DocId>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    /// Reads the binary matrix and line-oriented manifest, normalizing every
    /// row. Rejects non-finite values, near-zero rows, and any manifest that
    /// is not a bijection onto `0..count`.
    pub fn ingest(
        mut matrix_source: impl Read,
        manifest_source: impl BufRead,
    ) -> Result<Self, RetrievalError> {
        let mut header = [0u8; 12];
        matrix_source.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(RetrievalError::BadMagic);
        }
        let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;

        let expected = dim
            .checked_mul(count)
            .and_then(|n| n.checked_mul(4))
            .ok_or(RetrievalError::Truncated {
                expected: usize::MAX,
                actual: 0,
            })?;
        let mut raw = Vec::with_capacity(expected);
        matrix_source.read_to_end(&mut raw)?;
        if raw.len() < expected {
            return Err(RetrievalError::Truncated {
                expected,
                actual: raw.len(),
            });
        }

        let mut data = Vec::with_capacity(dim * count);
        for row in 0..count {
            let base = row * dim * 4;
            let mut norm_sq = 0.0f64;
            let start = data.len();
            for col in 0..dim {
                let offset = base + col * 4;
                let value = f32::from_le_bytes(raw[offset..offset + 4].try_into().unwrap());
                if !value.is_finite() {
                    return Err(RetrievalError::NonFinite { row });
                }
                norm_sq += f64::from(value) * f64::from(value);
                data.push(value);
            }
            let norm = norm_sq.sqrt();
            if norm < MIN_NORM {
                return Err(RetrievalError::ZeroVector { row });
            }
            for value in &mut data[start..] {
                *value = (f64::from(*value) / norm) as f32;
            }
        }

        let mut ids: Vec<Option<DocId>> = vec![None; count];
        let mut seen_ids = HashSet::new();
        let mut manifest_rows = 0usize;
        for (line_no, line) in manifest_source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(&line).map_err(|source| RetrievalError::ManifestParse {
                    line: line_no + 1,
                    source,
                })?;
            manifest_rows += 1;
            if record.row >= count {
                return Err(RetrievalError::RowOutOfRange {
                    row: record.row,
                    count,
                });
            }
            if ids[record.row].is_some() {
                return Err(RetrievalError::DuplicateRow { row: record.row });
            }
            if !seen_ids.insert(record.id.clone()) {
                return Err(RetrievalError::DuplicateId { id: record.id });
            }
            ids[record.row] = Some(record.id);
        }
        if manifest_rows != count {
            return Err(RetrievalError::ManifestCount {
                manifest: manifest_rows,
                matrix: count,
            });
        }
        let ids = ids.into_iter().map(|id| id.unwrap()).collect();
        Ok(Self { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[DocId] {
        &self.ids
    }

    pub fn id_of(&self, row: usize) -> &DocId {
        &self.ids[row]
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }
}

/// Writes a matrix in the binary embedding format. Rows are written as
/// given; normalization happens at ingestion.
pub fn write_embeddings(
    mut sink: impl Write,
    dim: usize,
    rows: impl IntoIterator<Item = impl AsRef<[f32]>>,
) -> Result<usize, RetrievalError> {
    let mut body: Vec<u8> = Vec::new();
    let mut count = 0u32;
    for row in rows {
        let row = row.as_ref();
        assert_eq!(row.len(), dim, "row length must equal dim");
        for value in row {
            body.extend_from_slice(&value.to_le_bytes());
        }
        count += 1;
    }
    sink.write_all(MAGIC)?;
    sink.write_all(&(dim as u32).to_le_bytes())?;
    sink.write_all(&count.to_le_bytes())?;
    sink.write_all(&body)?;
    Ok(count as usize)
}

/// Writes the row/id manifest for `ids`, one JSON record per line.
pub fn write_manifest(
    mut sink: impl Write,
    ids: impl IntoIterator<Item = DocId>,
) -> Result<(), RetrievalError> {
    for (row, id) in ids.into_iter().enumerate() {
        let record = ManifestRecord { row, id };
        serde_json::to_writer(&mut sink, &record).map_err(std::io::Error::other)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// A pre-encoded query vector, unit-normalized at load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVector {
    query_id: String,
    vector: Vec<f32>,
}

impl QueryVector {
    /// Normalizes the raw vector; scaling the input by any positive constant
    /// therefore yields the same query.
    pub fn new(query_id: impl Into<String>, vector: Vec<f32>) -> Result<Self, RetrievalError> {
        let query_id = query_id.into();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFiniteQuery { query_id });
        }
        let norm = vector
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt();
        if norm < MIN_NORM {
            return Err(RetrievalError::ZeroQuery { query_id });
        }
        let vector = vector
            .into_iter()
            .map(|v| (f64::from(v) / norm) as f32)
            .collect();
        Ok(Self { query_id, vector })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRecord {
    query_id: String,
    vector: Vec<f32>,
}

/// Loads and normalizes query vectors from a line-oriented JSON stream.
pub fn load_query_vectors(source: impl BufRead) -> Result<Vec<QueryVector>, RetrievalError> {
    let mut queries = Vec::new();
    for (line_no, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord =
            serde_json::from_str(&line).map_err(|source| RetrievalError::QueryParse {
                line: line_no + 1,
                source,
            })?;
        queries.push(QueryVector::new(record.query_id, record.vector)?);
    }
    Ok(queries)
}

/// Writes query vectors in the line-oriented JSON format.
pub fn write_query_vectors(
    mut sink: impl Write,
    queries: impl IntoIterator<Item = (String, Vec<f32>)>,
) -> Result<(), RetrievalError> {
    for (query_id, vector) in queries {
        let record = QueryRecord { query_id, vector };
        serde_json::to_writer(&mut sink, &record).map_err(std::io::Error::other)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Inner product of two equal-length vectors, accumulated in f64 in index
/// order so results do not depend on thread count.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

/// The `k` documents most similar to the query, scores descending, ties
/// broken by lexicographically smaller document id. Returns fewer than `k`
/// items only when the store is smaller than `k`.
pub fn top_k(
    store: &EmbeddingStore,
    query: &QueryVector,
    k: usize,
) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.vector().len() != store.dim() {
        return Err(RetrievalError::DimensionMismatch {
            query_id: query.query_id().to_owned(),
            expected: store.dim(),
            actual: query.vector().len(),
        });
    }

    let count = store.count();
    let dim = store.dim();
    let mut scores = vec![0.0f64; count];
    // Blocked scan: each block computes a disjoint slice of the score
    // vector, so the result is identical for any number of threads.
    scores
        .par_chunks_mut(SCAN_BLOCK_ROWS)
        .enumerate()
        .for_each(|(block, out)| {
            let base = block * SCAN_BLOCK_ROWS;
            for (i, slot) in out.iter_mut().enumerate() {
                let row = base + i;
                *slot = dot(&store.data[row * dim..(row + 1) * dim], query.vector());
            }
        });

    let take = k.min(count);
    let mut order: Vec<u32> = (0..count as u32).collect();
    let better = |a: &u32, b: &u32| {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .unwrap()
            .then_with(|| store.id_of(*a as usize).cmp(store.id_of(*b as usize)))
    };
    if take < count {
        order.select_nth_unstable_by(take, better);
        order.truncate(take);
    }
    order.sort_unstable_by(better);

    let items: Vec<DocId> = order
        .iter()
        .map(|&row| store.id_of(row as usize).clone())
        .collect();
    let top_scores: Vec<f64> = order.iter().map(|&row| scores[row as usize]).collect();
    // Ids are unique by manifest bijection and scores are sorted descending,
    // so the list invariants hold by construction.
    Ok(RankedList::with_scores(query.query_id(), items, top_scores, k)
        .expect("search output satisfies ranked-list invariants"))
}

/// `top_k` applied to each query, parallelized across queries; output order
/// matches input order.
pub fn batch_search(
    store: &EmbeddingStore,
    queries: &[QueryVector],
    k: usize,
) -> Result<Vec<RankedList>, RetrievalError> {
    queries
        .par_iter()
        .map(|query| top_k(store, query, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn store_from(rows: &[Vec<f32>], ids: &[&str]) -> EmbeddingStore {
        let dim = rows[0].len();
        let mut matrix = Vec::new();
        write_embeddings(&mut matrix, dim, rows).unwrap();
        let mut manifest = Vec::new();
        write_manifest(&mut manifest, ids.iter().map(|s| DocId::from(*s))).unwrap();
        EmbeddingStore::ingest(matrix.as_slice(), manifest.as_slice()).unwrap()
    }

    #[test]
    fn ingest_normalizes_rows() {
        let store = store_from(
            &[vec![3.0, 4.0, 0.0, 0.0], vec![0.0, 0.0, 5.0, 0.0]],
            &["a", "b"],
        );
        assert_eq!(store.count(), 2);
        assert_eq!(store.dim(), 4);
        for row in 0..2 {
            let norm: f64 = store
                .vector(row)
                .iter()
                .map(|v| f64::from(*v) * f64::from(*v))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ingest_rejects_manifest_count_mismatch() {
        let mut matrix = Vec::new();
        write_embeddings(
            &mut matrix,
            2,
            &[vec![1.0f32, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let mut manifest = Vec::new();
        write_manifest(&mut manifest, [DocId::from("a"), DocId::from("b")]).unwrap();
        let err = EmbeddingStore::ingest(matrix.as_slice(), manifest.as_slice()).unwrap_err();
        assert!(matches!(
            err,
            RetrievalError::ManifestCount {
                manifest: 2,
                matrix: 3
            }
        ));
    }

    #[test]
    fn ingest_rejects_zero_row_naming_it() {
        let mut matrix = Vec::new();
        write_embeddings(&mut matrix, 2, &[vec![1.0f32, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut manifest = Vec::new();
        write_manifest(&mut manifest, [DocId::from("a"), DocId::from("b")]).unwrap();
        let err = EmbeddingStore::ingest(matrix.as_slice(), manifest.as_slice()).unwrap_err();
        assert!(matches!(err, RetrievalError::ZeroVector { row: 1 }));
    }

    #[test]
    fn ingest_rejects_non_finite_naming_row() {
        let mut matrix = Vec::new();
        write_embeddings(&mut matrix, 2, &[vec![1.0f32, 0.0], vec![f32::NAN, 1.0]]).unwrap();
        let mut manifest = Vec::new();
        write_manifest(&mut manifest, [DocId::from("a"), DocId::from("b")]).unwrap();
        let err = EmbeddingStore::ingest(matrix.as_slice(), manifest.as_slice()).unwrap_err();
        assert!(matches!(err, RetrievalError::NonFinite { row: 1 }));
    }

    #[test]
    fn ingest_rejects_bad_magic_and_truncation() {
        let err = EmbeddingStore::ingest(&b"NOPE\0\0\0\0\0\0\0\0"[..], &b""[..]).unwrap_err();
        assert!(matches!(err, RetrievalError::BadMagic));

        let mut matrix = Vec::new();
        write_embeddings(&mut matrix, 4, &[vec![1.0f32, 0.0, 0.0, 0.0]]).unwrap();
        matrix.truncate(matrix.len() - 3);
        let err = EmbeddingStore::ingest(matrix.as_slice(), &b""[..]).unwrap_err();
        assert!(matches!(err, RetrievalError::Truncated { .. }));
    }

    #[test]
    fn ingest_rejects_duplicate_manifest_entries() {
        let mut matrix = Vec::new();
        write_embeddings(&mut matrix, 2, &[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
        let manifest = b"{\"row\":0,\"id\":\"a\"}\n{\"row\":0,\"id\":\"b\"}\n";
        let err = EmbeddingStore::ingest(matrix.as_slice(), &manifest[..]).unwrap_err();
        assert!(matches!(err, RetrievalError::DuplicateRow { row: 0 }));

        let manifest = b"{\"row\":0,\"id\":\"a\"}\n{\"row\":1,\"id\":\"a\"}\n";
        let err = EmbeddingStore::ingest(matrix.as_slice(), &manifest[..]).unwrap_err();
        assert!(matches!(err, RetrievalError::DuplicateId { .. }));
    }

    #[test]
    fn top_k_finds_exact_match_first() {
        let store = store_from(
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.7, 0.7, 0.0],
            ],
            &["x", "y", "xy"],
        );
        let query = QueryVector::new("q", vec![0.0, 2.0, 0.0]).unwrap();
        let result = top_k(&store, &query, 2).unwrap();
        assert_eq!(result.items()[0], DocId::from("y"));
        assert!((result.scores().unwrap()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        // Two identical rows; the smaller id must come first.
        let store = store_from(
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            &["zz", "aa", "mm"],
        );
        let query = QueryVector::new("q", vec![1.0, 0.0]).unwrap();
        let result = top_k(&store, &query, 3).unwrap();
        assert_eq!(
            result.items(),
            &[DocId::from("aa"), DocId::from("zz"), DocId::from("mm")]
        );
    }

    #[test]
    fn top_k_rejects_dimension_mismatch() {
        let store = store_from(&[vec![1.0, 0.0]], &["a"]);
        let query = QueryVector::new("q", vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            top_k(&store, &query, 1),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn top_k_returns_count_when_store_smaller_than_k() {
        let store = store_from(&[vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"]);
        let query = QueryVector::new("q", vec![1.0, 1.0]).unwrap();
        let result = top_k(&store, &query, 50).unwrap();
        assert_eq!(result.len(), 2);
        assert_eq!(result.depth_k(), 50);
    }

    #[test]
    fn query_scale_invariance() {
        let store = store_from(
            &[vec![0.3, 0.9, 0.1], vec![0.5, 0.2, 0.8], vec![0.9, 0.1, 0.4]],
            &["a", "b", "c"],
        );
        let raw = vec![0.4f32, 0.7, 0.2];
        let scaled: Vec<f32> = raw.iter().map(|v| v * 37.5).collect();
        let q1 = QueryVector::new("q", raw).unwrap();
        let q2 = QueryVector::new("q", scaled).unwrap();
        let r1 = top_k(&store, &q1, 3).unwrap();
        let r2 = top_k(&store, &q2, 3).unwrap();
        assert_eq!(r1.items(), r2.items());
    }

    /// Naive oracle: score every row with a plain loop, sort the whole list
    /// with the same tie-break, take k.
    fn naive_top_k(store: &EmbeddingStore, query: &QueryVector, k: usize) -> Vec<DocId> {
        let mut scored: Vec<(f64, DocId)> = (0..store.count())
            .map(|row| {
                let mut s = 0.0f64;
                for (a, b) in store.vector(row).iter().zip(query.vector()) {
                    s += f64::from(*a) * f64::from(*b);
                }
                (s, store.id_of(row).clone())
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }

    #[test]
    fn top_k_matches_naive_oracle_on_random_data() {
        let mut rng = StdRng::seed_from_u64(7);
        let dim = 16;
        let rows: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let ids: Vec<String> = (0..200).map(|i| format!("doc-{i:03}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let store = store_from(&rows, &id_refs);
        for q in 0..20 {
            let vector: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let query = QueryVector::new(format!("q{q}"), vector).unwrap();
            let got = top_k(&store, &query, 10).unwrap();
            let want = naive_top_k(&store, &query, 10);
            assert_eq!(got.items(), want.as_slice());
        }
    }

    #[test]
    fn batch_search_preserves_query_order() {
        let store = store_from(&[vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"]);
        let queries = vec![
            QueryVector::new("first", vec![1.0, 0.0]).unwrap(),
            QueryVector::new("second", vec![0.0, 1.0]).unwrap(),
        ];
        let results = batch_search(&store, &queries, 1).unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].query_id(), "first");
        assert_eq!(results[1].query_id(), "second");
        assert!(batch_search(&store, &[], 1).unwrap().is_empty());
    }

    #[test]
    fn query_vector_validation() {
        assert!(matches!(
            QueryVector::new("q", vec![0.0, 0.0]),
            Err(RetrievalError::ZeroQuery { .. })
        ));
        assert!(matches!(
            QueryVector::new("q", vec![f32::INFINITY, 1.0]),
            Err(RetrievalError::NonFiniteQuery { .. })
        ));
    }

    #[test]
    fn query_vectors_round_trip() {
        let mut buffer = Vec::new();
        write_query_vectors(
            &mut buffer,
            vec![
                ("a".to_owned(), vec![1.0f32, 2.0]),
                ("b".to_owned(), vec![0.5, 0.5]),
            ],
        )
        .unwrap();
        let queries = load_query_vectors(buffer.as_slice()).unwrap();
        assert_eq!(queries.len(), 2);
        assert_eq!(queries[0].query_id(), "a");
        let norm: f64 = queries[0]
            .vector()
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}
