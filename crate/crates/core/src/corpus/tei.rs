//! Pull parser for TEI-style structured article XML (the output format of
//! common scholarly PDF extraction tools).
//!
//! Extracts the article title, abstract, body sections with verbatim
//! paragraph text, bibliographic reference spans (`<ref type="bibr">`)
//! located by byte range within their paragraph, and the back-matter
//! bibliography (`<biblStruct xml:id=...>` titles) used to resolve spans.

use std::collections::HashMap;
use std::io::BufRead;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{Article, CitationSpan, CorpusError, Section, SpanLocation};

#[derive(Debug, Default)]
struct RawSpan {
    start: usize,
    end: usize,
    bib_refs: Vec<String>,
}

#[derive(Debug, Default)]
struct ParagraphBuilder {
    text: String,
    spans: Vec<RawSpan>,
    open_ref: Option<(usize, Vec<String>)>,
}

#[derive(Debug, PartialEq)]
enum Region {
    Header,
    Abstract,
    Body,
    Back,
    Other,
}

fn attribute(start: &BytesStart<'_>, key: &[u8]) -> Option<String> {
    start.attributes().flatten().find_map(|attr| {
        if attr.key.as_ref() == key {
            attr.unescape_value()
                .ok()
                .map(|value| value.into_owned())
        } else {
            None
        }
    })
}

/// Splits a `target` attribute like `"#b1 #b2"` into bibliography ids.
fn parse_targets(raw: &str) -> Vec<String> {
    raw.split_whitespace()
        .map(|t| t.trim_start_matches('#').to_owned())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Parses one structured article. `article_id` labels the result; the XML
/// itself carries no stable identifier.
pub fn parse_structured_article(
    source: impl BufRead,
    article_id: impl Into<String>,
) -> Result<Article, CorpusError> {
    let mut reader = Reader::from_reader(source);
    let mut buf = Vec::new();

    let mut stack: Vec<String> = Vec::new();
    let mut title = String::new();
    let mut abstract_parts: Vec<String> = Vec::new();
    let mut abstract_buf = String::new();
    let mut sections: Vec<Section> = Vec::new();
    let mut citations: Vec<CitationSpan> = Vec::new();
    let mut bib_titles: HashMap<String, String> = HashMap::new();
    let mut saw_body = false;

    let mut paragraph: Option<ParagraphBuilder> = None;
    let mut raw_spans_by_location: Vec<(usize, usize, RawSpan)> = Vec::new();
    let mut current_bib: Option<String> = None;
    let mut bib_title_buf: Option<String> = None;

    let region = |stack: &[String]| -> Region {
        if stack.iter().any(|n| n == "abstract") {
            Region::Abstract
        } else if stack.iter().any(|n| n == "body") {
            Region::Body
        } else if stack.iter().any(|n| n == "back") {
            Region::Back
        } else if stack.iter().any(|n| n == "teiHeader") {
            Region::Header
        } else {
            Region::Other
        }
    };

    loop {
        let event = reader.read_event_into(&mut buf).map_err(|source| {
            CorpusError::Xml {
                offset: reader.buffer_position(),
                message: source.to_string(),
            }
        })?;
        match event {
            Event::Start(start) => {
                let name = String::from_utf8_lossy(start.local_name().as_ref()).into_owned();
                if name == "body" {
                    saw_body = true;
                }
                match (region(&stack), name.as_str()) {
                    (Region::Body, "div") => sections.push(Section::default()),
                    (Region::Body, "p") => {
                        if sections.is_empty() {
                            sections.push(Section::default());
                        }
                        paragraph = Some(ParagraphBuilder::default());
                    }
                    (Region::Body, "ref") => {
                        if let Some(para) = paragraph.as_mut() {
                            let is_bibr =
                                attribute(&start, b"type").as_deref() == Some("bibr");
                            if is_bibr && para.open_ref.is_none() {
                                let targets = attribute(&start, b"target")
                                    .map(|t| parse_targets(&t))
                                    .unwrap_or_default();
                                para.open_ref = Some((para.text.len(), targets));
                            }
                        }
                    }
                    (Region::Back, "biblStruct") => {
                        current_bib = attribute(&start, b"xml:id");
                        bib_title_buf = None;
                    }
                    (Region::Back, "title") => {
                        if let Some(id) = &current_bib {
                            if !bib_titles.contains_key(id) && bib_title_buf.is_none() {
                                bib_title_buf = Some(String::new());
                            }
                        }
                    }
                    _ => {}
                }
                stack.push(name);
            }
            Event::Empty(start) => {
                // Self-closing elements carry no text; a self-closing bibr
                // ref yields an empty span.
                let name = String::from_utf8_lossy(start.local_name().as_ref()).into_owned();
                if name == "body" {
                    saw_body = true;
                }
                if region(&stack) == Region::Body && name == "ref" {
                    if let Some(para) = paragraph.as_mut() {
                        if attribute(&start, b"type").as_deref() == Some("bibr") {
                            let targets = attribute(&start, b"target")
                                .map(|t| parse_targets(&t))
                                .unwrap_or_default();
                            para.spans.push(RawSpan {
                                start: para.text.len(),
                                end: para.text.len(),
                                bib_refs: targets,
                            });
                        }
                    }
                }
            }
            Event::End(_) => {
                let name = stack.pop().unwrap_or_default();
                match (region(&stack), name.as_str()) {
                    (Region::Body, "p") => {
                        if let Some(mut para) = paragraph.take() {
                            if let Some((start, targets)) = para.open_ref.take() {
                                // Unclosed ref at paragraph end; close it at
                                // the paragraph boundary.
                                let end = para.text.len();
                                para.spans.push(RawSpan {
                                    start,
                                    end,
                                    bib_refs: targets,
                                });
                            }
                            let section_index = sections.len() - 1;
                            let section = sections.last_mut().unwrap();
                            let paragraph_index = section.paragraphs.len();
                            for span in para.spans {
                                raw_spans_by_location.push((
                                    section_index,
                                    paragraph_index,
                                    span,
                                ));
                            }
                            section.paragraphs.push(para.text);
                        }
                    }
                    (Region::Body, "ref") => {
                        if let Some(para) = paragraph.as_mut() {
                            if let Some((start, targets)) = para.open_ref.take() {
                                para.spans.push(RawSpan {
                                    start,
                                    end: para.text.len(),
                                    bib_refs: targets,
                                });
                            }
                        }
                    }
                    (Region::Abstract, "p") => {
                        let part = abstract_buf.trim().to_owned();
                        if !part.is_empty() {
                            abstract_parts.push(part);
                        }
                        abstract_buf.clear();
                    }
                    (Region::Back, "title") => {
                        if let (Some(id), Some(text)) = (&current_bib, bib_title_buf.take()) {
                            let text = text.trim().to_owned();
                            if !text.is_empty() {
                                bib_titles.entry(id.clone()).or_insert(text);
                            }
                        }
                    }
                    (Region::Back, "biblStruct") => {
                        current_bib = None;
                        bib_title_buf = None;
                    }
                    _ => {}
                }
            }
            Event::Text(text) => {
                let resolved = text.unescape().map_err(|source| CorpusError::Xml {
                    offset: reader.buffer_position(),
                    message: source.to_string(),
                })?;
                append_text(
                    &resolved,
                    &stack,
                    &region(&stack),
                    &mut title,
                    &mut abstract_buf,
                    paragraph.as_mut(),
                    &mut sections,
                    &mut bib_title_buf,
                );
            }
            Event::CData(data) => {
                let resolved = String::from_utf8_lossy(&data).into_owned();
                append_text(
                    &resolved,
                    &stack,
                    &region(&stack),
                    &mut title,
                    &mut abstract_buf,
                    paragraph.as_mut(),
                    &mut sections,
                    &mut bib_title_buf,
                );
            }
            Event::Eof => {
                if !stack.is_empty() {
                    return Err(CorpusError::Xml {
                        offset: reader.buffer_position(),
                        message: format!("unexpected end of file inside <{}>", stack.join("><")),
                    });
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }

    if !saw_body {
        return Err(CorpusError::MissingBody);
    }

    for (section, paragraph, span) in raw_spans_by_location {
        let resolved_title = if span.bib_refs.len() == 1 {
            bib_titles.get(&span.bib_refs[0]).cloned()
        } else {
            None
        };
        citations.push(CitationSpan {
            location: SpanLocation {
                section,
                paragraph,
                start: span.start,
                end: span.end,
            },
            bib_refs: span.bib_refs,
            resolved_title,
            in_corpus: false,
        });
    }

    Ok(Article {
        article_id: article_id.into(),
        title: title.trim().to_owned(),
        abstract_text: abstract_parts.join("\n"),
        sections,
        citations,
    })
}

#[allow(clippy::too_many_arguments)]
fn append_text(
    text: &str,
    stack: &[String],
    region: &Region,
    title: &mut String,
    abstract_buf: &mut String,
    paragraph: Option<&mut ParagraphBuilder>,
    sections: &mut [Section],
    bib_title_buf: &mut Option<String>,
) {
    let last = stack.last().map(String::as_str);
    match region {
        Region::Header => {
            if stack.iter().any(|n| n == "titleStmt") && stack.iter().any(|n| n == "title") {
                title.push_str(text);
            }
        }
        Region::Abstract => {
            if stack.iter().any(|n| n == "p") {
                abstract_buf.push_str(text);
            }
        }
        Region::Body => {
            if let Some(para) = paragraph {
                para.text.push_str(text);
            } else if last == Some("head") {
                if let Some(section) = sections.last_mut() {
                    section.header.push_str(text);
                }
            }
        }
        Region::Back => {
            if let Some(buf) = bib_title_buf {
                if stack.iter().any(|n| n == "title") {
                    buf.push_str(text);
                }
            }
        }
        Region::Other => {}
    }
}
