//! Client-side operations against an external chat-completion endpoint:
//! question generation, extractive keyword queries, and the
//! probability-weighted relevance scorer.
//!
//! Generated text is validated, never trusted: question batches must have
//! exactly the requested count with every entry ending in a question mark,
//! and keyword phrases must occur verbatim (case-insensitively) in the
//! context they were extracted from. Responses can be cached on disk (see
//! [`cache`]) so reruns are free and deterministic.

pub mod cache;
pub mod transport;

pub use cache::{CachedTransport, ResponseCache};
pub use transport::{
    ChatMessage, ChatRequest, ChatResponse, ChatTransport, HttpTransport, HttpTransportConfig,
    StubTransport, API_KEY_ENV,
};

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The extractive baseline query always contains this many keywords.
pub const KEYWORD_COUNT: usize = 5;

/// How many top log-probabilities to request for the scorer's next-token
/// distribution.
const SCORE_TOP_LOGPROBS: u32 = 20;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {reason}")]
    InvalidRequest { reason: String },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response ({reason}); raw response: {raw}")]
    BadResponse { reason: String, raw: String },
    #[error("expected {expected} questions, got {actual}; raw response: {raw}")]
    WrongQuestionCount {
        expected: usize,
        actual: usize,
        raw: String,
    },
    #[error("generated line is not a question: {text:?}")]
    NotAQuestion { text: String },
    #[error("expected {expected} keywords, got {actual}; raw response: {raw}")]
    WrongKeywordCount {
        expected: usize,
        actual: usize,
        raw: String,
    },
    #[error("keyword {phrase:?} does not occur in the context")]
    KeywordNotInContext { phrase: String },
    #[error("no score tokens \"1\"..\"5\" in the returned log-probabilities")]
    NoScoreTokens,
    #[error("non-finite log-probability for token {token:?}")]
    NonFiniteLogit { token: String },
    #[error("invalid score distribution: {reason}")]
    InvalidDistribution { reason: String },
    #[error("cache error: {0}")]
    Cache(std::io::Error),
    #[error("prompt template error: {reason}")]
    Template { reason: String },
}

/// Model name and sampling temperature, passed through opaquely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub model: String,
    pub temperature: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".to_owned(),
            temperature: 1.0,
        }
    }
}

/// A question-generation request for one masked paragraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub paragraph_id: String,
    pub context: String,
    pub n_questions: usize,
    pub settings: ModelSettings,
}

impl GenerationRequest {
    pub fn new(
        paragraph_id: impl Into<String>,
        context: impl Into<String>,
        n_questions: usize,
        settings: ModelSettings,
    ) -> Result<Self, GatewayError> {
        let context = context.into();
        if context.trim().is_empty() {
            return Err(GatewayError::InvalidRequest {
                reason: "context is empty".to_owned(),
            });
        }
        if n_questions == 0 {
            return Err(GatewayError::InvalidRequest {
                reason: "n_questions must be at least 1".to_owned(),
            });
        }
        Ok(Self {
            paragraph_id: paragraph_id.into(),
            context,
            n_questions,
            settings,
        })
    }
}

/// Prompt templates with `{placeholder}` substitution. The defaults ship in
/// the binary; a TOML file can override any of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    /// Placeholders: `{context}`, `{n}`.
    pub question_generation: String,
    /// Placeholders: `{context}`.
    pub keyword_extraction: String,
    /// Placeholders: `{question}`, `{keywords}`.
    pub relevance_scoring: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            question_generation: "\
You are helping an author strengthen a passage from a scientific article. \
One or more citations in the passage have been masked.

Passage:
{context}

Ask {n} questions which could help identify articles to cite and strengthen \
the passage. Write exactly {n} questions, one per line, with no numbering."
                .to_owned(),
            keyword_extraction: "\
Produce a search query containing 5 keywords found within the passage below. \
Reply with exactly 5 keyword phrases, one per line, each copied verbatim \
from the passage.

Passage:
{context}"
                .to_owned(),
            relevance_scoring: "\
On a scale from 1 (worst) to 5 (best), score how relevant the question is \
to the topic characterized by the list of keywords.
Question: {question}
Keywords: {keywords}
Answer:"
                .to_owned(),
        }
    }
}

impl PromptTemplates {
    pub fn from_toml_file(path: &std::path::Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path).map_err(GatewayError::Cache)?;
        toml::from_str(&raw).map_err(|e| GatewayError::Template {
            reason: e.to_string(),
        })
    }

    pub fn render_question_generation(&self, context: &str, n: usize) -> String {
        self.question_generation
            .replace("{context}", context)
            .replace("{n}", &n.to_string())
    }

    pub fn render_keyword_extraction(&self, context: &str) -> String {
        self.keyword_extraction.replace("{context}", context)
    }

    pub fn render_relevance_scoring(&self, question: &str, keywords: &[String]) -> String {
        self.relevance_scoring
            .replace("{question}", question)
            .replace("{keywords}", &keywords.join(", "))
    }
}

/// Strips list decoration ("1. ", "2) ", "- ", quotes) from a generated
/// line.
fn strip_decoration(line: &str) -> &str {
    let trimmed = line.trim();
    let trimmed = trimmed
        .strip_prefix(|c: char| c == '-' || c == '*' || c == '\u{2022}')
        .map(str::trim_start)
        .unwrap_or(trimmed);
    let without_number = trimmed
        .find(|c: char| !c.is_ascii_digit())
        .filter(|&pos| pos > 0)
        .and_then(|pos| {
            let rest = &trimmed[pos..];
            rest.strip_prefix('.')
                .or_else(|| rest.strip_prefix(')'))
                .map(str::trim_start)
        })
        .unwrap_or(trimmed);
    without_number.trim_matches('"').trim_matches('\'').trim()
}

/// Asks the endpoint for the batch of questions and validates the reply:
/// exactly `n_questions` non-empty lines, each ending in `?`, returned in
/// generation order (order matters downstream).
pub fn generate_questions(
    request: &GenerationRequest,
    transport: &dyn ChatTransport,
    templates: &PromptTemplates,
) -> Result<Vec<String>, GatewayError> {
    let prompt = templates.render_question_generation(&request.context, request.n_questions);
    let chat = ChatRequest::text(
        request.settings.model.clone(),
        request.settings.temperature,
        prompt,
    );
    let response = transport.complete(&chat)?;
    let questions: Vec<String> = response
        .content
        .lines()
        .map(strip_decoration)
        .filter(|line| !line.is_empty())
        .map(str::to_owned)
        .collect();
    if questions.len() != request.n_questions {
        return Err(GatewayError::WrongQuestionCount {
            expected: request.n_questions,
            actual: questions.len(),
            raw: response.content,
        });
    }
    for question in &questions {
        if !question.ends_with('?') {
            return Err(GatewayError::NotAQuestion {
                text: question.clone(),
            });
        }
    }
    Ok(questions)
}

/// Asks for the extractive keyword query and enforces the extractive rule:
/// exactly five phrases, each occurring in the context under
/// case-insensitive comparison.
pub fn extract_keywords(
    context: &str,
    transport: &dyn ChatTransport,
    settings: &ModelSettings,
    templates: &PromptTemplates,
) -> Result<Vec<String>, GatewayError> {
    let prompt = templates.render_keyword_extraction(context);
    let chat = ChatRequest::text(settings.model.clone(), settings.temperature, prompt);
    let response = transport.complete(&chat)?;

    let lines: Vec<&str> = response
        .content
        .lines()
        .filter(|line| !line.trim().is_empty())
        .collect();
    // Accept either one phrase per line or a single comma-separated query.
    let raw_phrases: Vec<String> = if lines.len() == 1 && lines[0].contains(',') {
        lines[0].split(',').map(str::to_owned).collect()
    } else {
        lines.into_iter().map(str::to_owned).collect()
    };
    let phrases: Vec<String> = raw_phrases
        .iter()
        .map(|p| strip_decoration(p).to_owned())
        .filter(|p| !p.is_empty())
        .collect();
    if phrases.len() != KEYWORD_COUNT {
        return Err(GatewayError::WrongKeywordCount {
            expected: KEYWORD_COUNT,
            actual: phrases.len(),
            raw: response.content,
        });
    }
    let haystack = context.to_lowercase();
    for phrase in &phrases {
        if !haystack.contains(&phrase.to_lowercase()) {
            return Err(GatewayError::KeywordNotInContext {
                phrase: phrase.clone(),
            });
        }
    }
    Ok(phrases)
}

/// Probabilities over the discrete relevance scores 1-5, serialized as
/// `{"1": p1, ..., "5": p5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct ScoreDistribution {
    probs: [f64; 5],
}

impl ScoreDistribution {
    pub fn new(probs: [f64; 5]) -> Result<Self, GatewayError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(GatewayError::InvalidDistribution {
                reason: "probabilities must be finite and non-negative".to_owned(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GatewayError::InvalidDistribution {
                reason: format!("probabilities sum to {sum}, expected 1"),
            });
        }
        Ok(Self { probs })
    }

    /// Probability of score `value` in 1..=5.
    pub fn probability(&self, value: usize) -> f64 {
        assert!((1..=5).contains(&value), "score values are 1..=5");
        self.probs[value - 1]
    }

    pub fn probabilities(&self) -> &[f64; 5] {
        &self.probs
    }
}

impl TryFrom<BTreeMap<String, f64>> for ScoreDistribution {
    type Error = String;

    fn try_from(map: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        let mut probs = [0.0f64; 5];
        for (key, value) in map {
            let index: usize = key.parse().map_err(|_| format!("bad score key {key:?}"))?;
            if !(1..=5).contains(&index) {
                return Err(format!("score key {index} outside 1..=5"));
            }
            probs[index - 1] = value;
        }
        Self::new(probs).map_err(|e| e.to_string())
    }
}

impl From<ScoreDistribution> for BTreeMap<String, f64> {
    fn from(dist: ScoreDistribution) -> Self {
        dist.probs
            .iter()
            .enumerate()
            .map(|(i, p)| ((i + 1).to_string(), *p))
            .collect()
    }
}

/// Restricts returned log-probabilities to the score tokens `"1"`..`"5"`
/// and renormalizes with a softmax over the tokens that are present;
/// missing score tokens get probability 0.
pub fn score_distribution(
    token_logprobs: &HashMap<String, f64>,
) -> Result<ScoreDistribution, GatewayError> {
    let mut logits: [Option<f64>; 5] = [None; 5];
    for (token, logit) in token_logprobs {
        if let Ok(value) = token.parse::<usize>() {
            if (1..=5).contains(&value) && token.len() == 1 {
                if !logit.is_finite() {
                    return Err(GatewayError::NonFiniteLogit {
                        token: token.clone(),
                    });
                }
                logits[value - 1] = Some(*logit);
            }
        }
    }
    let max = logits
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(GatewayError::NoScoreTokens);
    }
    let mut weights = [0.0f64; 5];
    let mut total = 0.0;
    for (slot, logit) in weights.iter_mut().zip(&logits) {
        if let Some(logit) = logit {
            *slot = (logit - max).exp();
            total += *slot;
        }
    }
    let probs = weights.map(|w| w / total);
    ScoreDistribution::new(probs)
}

/// Expected value of the predicted rating: `sum(p_i * i)`, in [1, 5].
pub fn expected_score(dist: &ScoreDistribution) -> f64 {
    dist.probabilities()
        .iter()
        .enumerate()
        .map(|(index, p)| p * (index + 1) as f64)
        .sum()
}

/// Scores one question against a keyword list: builds the scoring prompt,
/// requests next-token log-probabilities, and reduces them to the expected
/// rating.
pub fn score_relevance(
    question: &str,
    keywords: &[String],
    transport: &dyn ChatTransport,
    settings: &ModelSettings,
    templates: &PromptTemplates,
) -> Result<(ScoreDistribution, f64), GatewayError> {
    let prompt = templates.render_relevance_scoring(question, keywords);
    let chat = ChatRequest::next_token_logprobs(
        settings.model.clone(),
        prompt,
        SCORE_TOP_LOGPROBS,
    );
    let response = transport.complete(&chat)?;
    let logprobs = response
        .first_token_top_logprobs
        .ok_or_else(|| GatewayError::BadResponse {
            reason: "endpoint returned no token log-probabilities".to_owned(),
            raw: response.content.clone(),
        })?;
    let map: HashMap<String, f64> = logprobs.into_iter().collect();
    let dist = score_distribution(&map)?;
    let expected = expected_score(&dist);
    Ok((dist, expected))
}

type GenerationResult = Result<Vec<String>, GatewayError>;

/// Runs many generation requests with a bounded number of in-flight calls.
/// Results come back in request order.
pub fn generate_all(
    requests: &[GenerationRequest],
    transport: &dyn ChatTransport,
    templates: &PromptTemplates,
    max_in_flight: usize,
) -> Vec<GenerationResult> {
    let workers = max_in_flight.max(1).min(requests.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<GenerationResult>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= requests.len() {
                    break;
                }
                let result = generate_questions(&requests[index], transport, templates);
                *slots[index].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
