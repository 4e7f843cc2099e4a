//! Building evaluation datapoints from structured article XML: related-work
//! extraction, citation masking, and single-citation candidate filtering.
//!
//! A paragraph becomes a [`Datapoint`] when exactly one of its citation
//! spans is a candidate: the span points at exactly one bibliography entry
//! whose title resolves in the retrieval corpus. The resolved document is
//! the retrieval target; every citation span in the paragraph is replaced by
//! the mask token so queries cannot leak the answer.
//!
//! # File formats
//!
//! Corpus titles: one JSON record per line, `{"id": ..., "title": ...}`.
//! Datapoints: one JSON record per line,
//! `{"paragraph_id": ..., "masked_text": ..., "target_id": ...,
//!   "source_article_id": ...}`.

mod tei;

pub use tei::parse_structured_article;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::DocId;

/// Default mask token substituted for citation spans.
pub const DEFAULT_MASK_TOKEN: &str = "[CITATION]";

/// Default related-work section header pattern.
pub const DEFAULT_SECTION_PATTERN: &str = "related works?|background";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("xml parse error at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("article has no body text")]
    MissingBody,
    #[error("invalid section pattern: {0}")]
    BadPattern(regex::Error),
    #[error("citation spans overlap in {paragraph_id:?}")]
    OverlappingSpans { paragraph_id: String },
    #[error("citation span {start}..{end} exceeds paragraph of {len} bytes in {paragraph_id:?}")]
    SpanOutOfBounds {
        paragraph_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("titles file line {line}: {source}")]
    TitleParse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("datapoints file line {line}: {source}")]
    DatapointParse {
        line: usize,
        source: serde_json::Error,
    },
}

/// Byte range of a citation within its paragraph, addressed by section and
/// paragraph index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLocation {
    pub section: usize,
    pub paragraph: usize,
    pub start: usize,
    pub end: usize,
}

/// One bibliographic reference marker found in body text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationSpan {
    pub location: SpanLocation,
    /// Bibliography ids the marker points at; a marker citing several
    /// entries is never a candidate.
    pub bib_refs: Vec<String>,
    /// Title of the sole bibliography entry, when it exists and has one.
    pub resolved_title: Option<String>,
    /// Whether the resolved title was found in the retrieval corpus; set
    /// during candidate selection.
    pub in_corpus: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub header: String,
    pub paragraphs: Vec<String>,
}

/// A parsed article: metadata, body sections, and located citation spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub title: String,
    pub abstract_text: String,
    pub sections: Vec<Section>,
    pub citations: Vec<CitationSpan>,
}

/// Case-insensitive header predicate selecting the sections to mask.
#[derive(Debug, Clone)]
pub struct SectionMatcher {
    pattern: regex::Regex,
}

impl SectionMatcher {
    pub fn new(pattern: &str) -> Result<Self, CorpusError> {
        let pattern = regex::RegexBuilder::new(pattern)
            .case_insensitive(true)
            .build()
            .map_err(CorpusError::BadPattern)?;
        Ok(Self { pattern })
    }

    /// Matches "Related Work(s)" and "Background" headers.
    pub fn related_work() -> Self {
        Self::new(DEFAULT_SECTION_PATTERN).expect("default pattern is valid")
    }

    pub fn matches(&self, header: &str) -> bool {
        self.pattern.is_match(header)
    }
}

impl Default for SectionMatcher {
    fn default() -> Self {
        Self::related_work()
    }
}

/// A related-work paragraph with its citation spans replaced by the mask
/// token. Span locations are remapped to the inserted tokens, so masking an
/// already-masked paragraph is a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedParagraph {
    pub paragraph_id: String,
    pub source_article_id: String,
    pub section_header: String,
    pub text: String,
    pub spans: Vec<CitationSpan>,
}

/// Replaces each span's byte range with `mask_token`, right to left so
/// earlier offsets stay valid. Returns the masked text and the spans with
/// ranges remapped onto the inserted tokens.
pub fn apply_mask(
    paragraph_id: &str,
    text: &str,
    spans: &[CitationSpan],
    mask_token: &str,
) -> Result<(String, Vec<CitationSpan>), CorpusError> {
    let mut ordered: Vec<&CitationSpan> = spans.iter().collect();
    ordered.sort_by_key(|s| (s.location.start, s.location.end));
    for pair in ordered.windows(2) {
        if pair[1].location.start < pair[0].location.end {
            return Err(CorpusError::OverlappingSpans {
                paragraph_id: paragraph_id.to_owned(),
            });
        }
    }
    for span in &ordered {
        if span.location.end > text.len() || span.location.start > span.location.end {
            return Err(CorpusError::SpanOutOfBounds {
                paragraph_id: paragraph_id.to_owned(),
                start: span.location.start,
                end: span.location.end,
                len: text.len(),
            });
        }
    }

    let mut masked = text.to_owned();
    for span in ordered.iter().rev() {
        masked.replace_range(span.location.start..span.location.end, mask_token);
    }

    // Remap spans onto the tokens, walking left to right with the running
    // length shift.
    let mut remapped = Vec::with_capacity(ordered.len());
    let mut shift: isize = 0;
    for span in &ordered {
        let old_len = (span.location.end - span.location.start) as isize;
        let new_start = (span.location.start as isize + shift) as usize;
        let mut updated = (*span).clone();
        updated.location.start = new_start;
        updated.location.end = new_start + mask_token.len();
        remapped.push(updated);
        shift += mask_token.len() as isize - old_len;
    }
    Ok((masked, remapped))
}

/// Masks every citation span inside sections whose header matches, yielding
/// one [`MaskedParagraph`] per paragraph of those sections.
pub fn mask_citations(
    article: &Article,
    matcher: &SectionMatcher,
    mask_token: &str,
) -> Result<Vec<MaskedParagraph>, CorpusError> {
    let mut spans_by_location: HashMap<(usize, usize), Vec<CitationSpan>> = HashMap::new();
    for span in &article.citations {
        spans_by_location
            .entry((span.location.section, span.location.paragraph))
            .or_default()
            .push(span.clone());
    }

    let mut masked = Vec::new();
    for (section_index, section) in article.sections.iter().enumerate() {
        if !matcher.matches(&section.header) {
            continue;
        }
        for (paragraph_index, text) in section.paragraphs.iter().enumerate() {
            let paragraph_id = format!(
                "{}#s{}p{}",
                article.article_id, section_index, paragraph_index
            );
            let spans = spans_by_location
                .remove(&(section_index, paragraph_index))
                .unwrap_or_default();
            let (text, spans) = apply_mask(&paragraph_id, text, &spans, mask_token)?;
            masked.push(MaskedParagraph {
                paragraph_id,
                source_article_id: article.article_id.clone(),
                section_header: section.header.clone(),
                text,
                spans,
            });
        }
    }
    Ok(masked)
}

/// Normalized form used for exact title matching: lowercase, punctuation
/// stripped, whitespace collapsed.
pub fn normalize_title(title: &str) -> String {
    let mut out = String::with_capacity(title.len());
    let mut pending_space = false;
    for c in title.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum TitleEntry {
    Unique(DocId),
    /// Two corpus documents normalize to the same title; resolving either
    /// would be ambiguous, so lookups fail.
    Ambiguous,
}

#[derive(Debug, Serialize, Deserialize)]
struct TitleRecord {
    id: DocId,
    title: String,
}

/// Exact-match index from normalized titles to corpus document ids.
#[derive(Debug, Clone, Default)]
pub struct TitleIndex {
    map: HashMap<String, TitleEntry>,
    ambiguous: usize,
}

impl TitleIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a line-oriented titles file.
    pub fn from_reader(source: impl BufRead) -> Result<Self, CorpusError> {
        let mut index = Self::new();
        for (line_no, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TitleRecord =
                serde_json::from_str(&line).map_err(|source| CorpusError::TitleParse {
                    line: line_no + 1,
                    source,
                })?;
            index.insert(record.id, &record.title);
        }
        Ok(index)
    }

    pub fn insert(&mut self, id: DocId, title: &str) {
        let key = normalize_title(title);
        if key.is_empty() {
            return;
        }
        match self.map.get(&key) {
            None => {
                self.map.insert(key, TitleEntry::Unique(id));
            }
            Some(TitleEntry::Unique(existing)) if *existing == id => {}
            Some(_) => {
                log::warn!("title collision on {key:?}; entries become unresolvable");
                self.map.insert(key, TitleEntry::Ambiguous);
                self.ambiguous += 1;
            }
        }
    }

    pub fn resolve(&self, title: &str) -> Option<&DocId> {
        match self.map.get(&normalize_title(title)) {
            Some(TitleEntry::Unique(id)) => Some(id),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One evaluation datapoint: a masked paragraph with a known retrieval
/// target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datapoint {
    pub paragraph_id: String,
    pub masked_text: String,
    pub target_id: DocId,
    pub source_article_id: String,
}

impl Datapoint {
    /// The context handed to query generation: the full masked paragraph.
    pub fn context_window(&self) -> &str {
        &self.masked_text
    }
}

/// Why paragraphs were dropped during candidate selection. Counts sum to
/// input size minus emitted datapoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// Paragraph contains no citation span at all.
    pub no_citation: usize,
    /// Citations exist but none is a single-target, in-corpus candidate.
    pub no_candidate: usize,
    /// More than one candidate citation; the target would be ambiguous.
    pub multiple_candidates: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.no_citation + self.no_candidate + self.multiple_candidates
    }
}

#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub datapoints: Vec<Datapoint>,
    pub drops: DropCounts,
}

/// Keeps paragraphs with exactly one candidate citation: a span pointing at
/// exactly one bibliography entry whose title resolves in the corpus. The
/// resolved id becomes the target. Also sets the `in_corpus` flag on every
/// span it inspects.
pub fn select_candidates(paragraphs: &mut [MaskedParagraph], index: &TitleIndex) -> Selection {
    let mut selection = Selection::default();
    for paragraph in paragraphs.iter_mut() {
        if paragraph.spans.is_empty() {
            selection.drops.no_citation += 1;
            continue;
        }
        let mut candidates: Vec<DocId> = Vec::new();
        for span in paragraph.spans.iter_mut() {
            let resolved = match (&span.bib_refs[..], &span.resolved_title) {
                ([_single], Some(title)) => index.resolve(title),
                _ => None,
            };
            span.in_corpus = resolved.is_some();
            if let Some(id) = resolved {
                candidates.push(id.clone());
            }
        }
        match candidates.len() {
            0 => selection.drops.no_candidate += 1,
            1 => selection.datapoints.push(Datapoint {
                paragraph_id: paragraph.paragraph_id.clone(),
                masked_text: paragraph.text.clone(),
                target_id: candidates.into_iter().next().unwrap(),
                source_article_id: paragraph.source_article_id.clone(),
            }),
            _ => selection.drops.multiple_candidates += 1,
        }
    }
    selection
}

/// Parses every `.xml` file in `xml_dir` (sorted by file name, stem as the
/// article id), masks matching sections, and filters candidates.
pub fn build_datapoints(
    xml_dir: &Path,
    index: &TitleIndex,
    matcher: &SectionMatcher,
    mask_token: &str,
) -> Result<Selection, CorpusError> {
    let mut files: Vec<_> = std::fs::read_dir(xml_dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|path| path.extension().is_some_and(|ext| ext == "xml"))
        .collect();
    files.sort();

    let mut combined = Selection::default();
    for path in files {
        let article_id = path
            .file_stem()
            .map(|stem| stem.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = std::io::BufReader::new(std::fs::File::open(&path)?);
        let article = parse_structured_article(file, article_id)?;
        let mut masked = mask_citations(&article, matcher, mask_token)?;
        let selection = select_candidates(&mut masked, index);
        combined.datapoints.extend(selection.datapoints);
        combined.drops.no_citation += selection.drops.no_citation;
        combined.drops.no_candidate += selection.drops.no_candidate;
        combined.drops.multiple_candidates += selection.drops.multiple_candidates;
    }
    Ok(combined)
}

/// Writes datapoints in the line-oriented format.
pub fn write_datapoints(
    mut sink: impl Write,
    datapoints: &[Datapoint],
) -> Result<(), CorpusError> {
    for datapoint in datapoints {
        serde_json::to_writer(&mut sink, datapoint).map_err(std::io::Error::other)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads datapoints from the line-oriented format.
pub fn load_datapoints(source: impl BufRead) -> Result<Vec<Datapoint>, CorpusError> {
    let mut datapoints = Vec::new();
    for (line_no, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let datapoint: Datapoint =
            serde_json::from_str(&line).map_err(|source| CorpusError::DatapointParse {
                line: line_no + 1,
                source,
            })?;
        datapoints.push(datapoint);
    }
    Ok(datapoints)
}
