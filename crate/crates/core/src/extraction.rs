//! Structured answers from free-text completions.
//!
//! The rule-based pass reads each question's final stated answer:
//!
//! - A scale question is bound by one of its labels. The first number after
//!   the label in the same sentence is the statement's value ("Confidence:
//!   8/10", "on fairness, I'd say 4"). Denominators ("out of 10", "/10") and
//!   scale descriptions ("on a 1 to 7 scale") are skipped.
//! - A binary question is bound by its positive or negative term, or by a
//!   label followed by yes/no. A negation earlier in the same clause flips
//!   the positive term.
//! - When a question is stated more than once, the last statement wins.
//! - Number words are recognized for zero to ten and twenty-one.
//!
//! Values outside a question's bounds make the response invalid. They are
//! never clamped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{AnswerKind, Arm, ChatMessage, QuestionItem, TrialPlan};
use crate::dispatch::{ChatProvider, ChatRequest, Outcome, TranscriptRecord, TrialContext};
use crate::seed;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("audit sample of {k} requested from {n} responses")]
    SampleTooLarge { k: usize, n: usize },
    #[error("audit response `{0}` has no transcript")]
    MissingTranscript(String),
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    Refused,
    Unparseable,
    OutOfRange,
    TransportError,
    Truncated,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::Refused => "refused",
            InvalidReason::Unparseable => "unparseable",
            InvalidReason::OutOfRange => "out-of-range",
            InvalidReason::TransportError => "transport-error",
            InvalidReason::Truncated => "truncated",
        }
    }
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "kebab-case")]
pub enum Validity {
    Valid,
    Invalid(InvalidReason),
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMethod {
    RuleBased,
    PluggableExtractor,
}

/// Where a rule-based value came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub question_id: String,
    pub value: i64,
    /// The matched token, lowercased, as it appears in the completion.
    pub token: String,
    /// Byte offset of the token in the lowercased completion.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub trial_id: String,
    pub answers: BTreeMap<String, i64>,
    pub validity: Validity,
    pub method: ExtractionMethod,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
}

impl StructuredResponse {
    fn invalid(trial_id: &str, reason: InvalidReason, note: impl Into<String>) -> Self {
        StructuredResponse {
            trial_id: trial_id.to_string(),
            answers: BTreeMap::new(),
            validity: Validity::Invalid(reason),
            method: ExtractionMethod::RuleBased,
            notes: vec![note.into()],
            evidence: Vec::new(),
        }
    }
}

/// A second-chance extractor for responses the rules cannot resolve.
pub trait FallbackExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Values for any of `unresolved` it can determine.
    fn extract(&self, text: &str, unresolved: &[&QuestionItem]) -> BTreeMap<String, i64>;
}

/// Asks a chat model to read off the unresolved answers. The model replies
/// with `id: value` lines; anything else is ignored.
pub struct ProviderFallback {
    provider: Arc<dyn ChatProvider>,
    model: String,
    name: String,
}

impl ProviderFallback {
    pub fn new(provider: Arc<dyn ChatProvider>, model: &str) -> Self {
        ProviderFallback {
            provider,
            model: model.to_string(),
            name: format!("provider:{model}"),
        }
    }

    fn prompt(text: &str, unresolved: &[&QuestionItem]) -> String {
        let mut prompt = String::from(
            "Read the response below and report its final answer to each question, one per line as \
             `id: value` with an integer value. Write `id: unknown` if the response gives no answer.\n\nQuestions:\n",
        );
        for q in unresolved {
            let coding = match &q.kind {
                AnswerKind::Binary { positive, negative } => format!("1 = {positive}, 0 = {negative}"),
                AnswerKind::Scale { lo, hi } => format!("integer from {lo} to {hi}"),
            };
            prompt.push_str(&format!("- {}: {} ({coding})\n", q.id, q.prompt));
        }
        prompt.push_str("\nResponse:\n");
        prompt.push_str(text);
        prompt
    }
}

impl FallbackExtractor for ProviderFallback {
    fn name(&self) -> &str {
        &self.name
    }

    fn extract(&self, text: &str, unresolved: &[&QuestionItem]) -> BTreeMap<String, i64> {
        let request = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(Self::prompt(text, unresolved))],
            temperature: 0.0,
            max_tokens: 256,
        };
        let plan = TrialPlan {
            trial_id: format!("extract-{}", &seed::sha256_hex(text.as_bytes())[..16]),
            subject_id: String::new(),
            persona_id: None,
            model_id: self.model.clone(),
            arm: Arm::NoPersona,
            condition: Default::default(),
            vignette_order: Vec::new(),
            position: 0,
            session_vignettes: Vec::new(),
            question_order: BTreeMap::new(),
            seed: 0,
        };
        let context = TrialContext {
            plan: &plan,
            persona: None,
            session_id: &plan.trial_id,
            attempt: 1,
        };
        let Ok(runtime) = tokio::runtime::Builder::new_current_thread().enable_all().build() else {
            return BTreeMap::new();
        };
        let Ok(completion) = runtime.block_on(self.provider.complete(&request, &context)) else {
            return BTreeMap::new();
        };
        let line = Regex::new(r"(?m)^\s*[-*]?\s*`?([\w-]+)`?\s*:\s*(-?\d+)\s*$").expect("static pattern");
        let wanted: BTreeSet<&str> = unresolved.iter().map(|q| q.id.as_str()).collect();
        line.captures_iter(&completion.text)
            .filter(|c| wanted.contains(&c[1]))
            .filter_map(|c| Some((c[1].to_string(), c[2].parse().ok()?)))
            .collect()
    }
}

const NUMBER_WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
const NUM: &str = r"(?:twenty-one|zero|one|two|three|four|five|six|seven|eight|nine|ten|\d+)";

struct Grammar {
    sentence_break: Regex,
    number: Regex,
    scale_descriptions: Vec<Regex>,
    cues: Regex,
    negation: Regex,
    refusal: Vec<Regex>,
}

fn grammar() -> &'static Grammar {
    static GRAMMAR: std::sync::OnceLock<Grammar> = std::sync::OnceLock::new();
    GRAMMAR.get_or_init(|| {
        let re = |p: String| Regex::new(&p).expect("static pattern");
        let range = format!(r"{NUM}\s*(?:-|–|—|to)\s*{NUM}");
        Grammar {
            sentence_break: re(r"[.!?]+(?:\s+|$)|\n+".into()),
            number: re(format!(r"\b{NUM}\b")),
            scale_descriptions: vec![
                re(format!(r"\([^()]*\b{range}\b[^()]*\)")),
                re(format!(r"\b(?:scale|range)\s+(?:of|from)\s+{range}\b")),
                re(format!(r"\bfrom\s+{NUM}\s+to\s+{NUM}\b")),
                re(format!(r"\b{range}\s+scale\b")),
                re(format!(r"\b{NUM}-point\b")),
            ],
            cues: re(format!(
                r"\b(?:i'd say|i would say|i'd go with|i would go with|i'd give it|i would give it)\s+(?:an?\s+)?({NUM})\b|\b({NUM})\s*(?:/|out of)\s*{NUM}\b"
            )),
            negation: re(r"\b(?:not|no|never|hardly|cannot)\b|n't\b".into()),
            refusal: vec![
                re(r"\bi (?:refuse|won't|will not|cannot|can't|am unable to|am not able to|must decline)\b".into()),
                re(r"\bas an ai\b".into()),
                re(r"\bi'm (?:sorry|afraid),? but i (?:can't|cannot|won't)\b".into()),
                re(r"\bi'm (?:not able|unable) to\b".into()),
            ],
        }
    })
}

fn number_value(token: &str) -> Option<i64> {
    if token == "twenty-one" {
        return Some(21);
    }
    if let Some(i) = NUMBER_WORDS.iter().position(|w| *w == token) {
        return Some(i as i64);
    }
    token.parse().ok()
}

fn normalize(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' => '\'',
            '\u{2212}' => '-',
            c => c,
        })
        .collect::<String>()
        .to_lowercase()
}

/// Blanks scale descriptions so their numbers are never read as answers.
/// Byte offsets are preserved.
fn mask_scale_descriptions(text: &str) -> String {
    let mut masked = text.to_string();
    for re in &grammar().scale_descriptions {
        masked = re.replace_all(&masked, |c: &regex::Captures| " ".repeat(c[0].len())).into_owned();
    }
    masked
}

fn sentences(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for m in grammar().sentence_break.find_iter(text) {
        // A period between digits is a decimal point, not a break.
        if m.as_str().starts_with('.') && m.start() > 0 && text[m.end()..].starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        if m.start() > start {
            spans.push((start, m.start()));
        }
        start = m.end();
    }
    if start < text.len() {
        spans.push((start, text.len()));
    }
    spans
}

#[derive(Debug, Clone)]
struct Statement {
    offset: usize,
    value: i64,
    token: String,
}

/// Integer tokens in `text[from..to]` that can be answers: not denominators,
/// decimals or percentages.
fn answer_numbers(text: &str, from: usize, to: usize) -> Vec<Statement> {
    let mut out = Vec::new();
    for m in grammar().number.find_iter(&text[from..to]) {
        let (start, end) = (from + m.start(), from + m.end());
        let before = text[..start].trim_end();
        if before.ends_with('/') || before.ends_with("out of") {
            continue;
        }
        let after = &text[end..];
        let prev = text[..start].chars().next_back();
        if after.starts_with('%')
            || after.starts_with(" percent")
            || (after.starts_with('.') && after[1..].starts_with(|c: char| c.is_ascii_digit()))
            || (prev == Some('.') && text[..start - 1].ends_with(|c: char| c.is_ascii_digit()))
        {
            continue;
        }
        let Some(mut value) = number_value(m.as_str()) else { continue };
        let mut token = m.as_str().to_string();
        let mut offset = start;
        // A minus sign directly before a number, not inside a word or range.
        if prev == Some('-') && m.as_str().starts_with(|c: char| c.is_ascii_digit()) {
            let before_minus = text[..start - 1].chars().next_back();
            if !before_minus.is_some_and(|c| c.is_alphanumeric()) {
                value = -value;
                token = format!("-{token}");
                offset = start - 1;
            }
        }
        out.push(Statement { offset, value, token });
    }
    out
}

/// Compiles `pattern` once per process. Question-specific patterns repeat
/// across every transcript of a run.
fn cached(pattern: String) -> Option<Regex> {
    static CACHE: std::sync::OnceLock<std::sync::Mutex<HashMap<String, Regex>>> = std::sync::OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(re) = cache.lock().expect("regex cache").get(&pattern) {
        return Some(re.clone());
    }
    let re = Regex::new(&pattern).ok()?;
    cache.lock().expect("regex cache").insert(pattern, re.clone());
    Some(re)
}

fn label_regex(labels: &[String]) -> Option<Regex> {
    let mut labels: Vec<&String> = labels.iter().filter(|l| !l.is_empty()).collect();
    if labels.is_empty() {
        return None;
    }
    labels.sort_by_key(|l| std::cmp::Reverse(l.len()));
    let alternatives: Vec<String> = labels.iter().map(|l| regex::escape(l)).collect();
    cached(format!(r"\b(?:{})\b", alternatives.join("|")))
}

fn term_regex(term: &str) -> Option<Regex> {
    cached(format!(r"\b{}\b", regex::escape(&term.to_lowercase())))
}

/// Statements for one binary question, in text order.
fn binary_statements(text: &str, q: &QuestionItem, positive: &str, negative: &str) -> Vec<Statement> {
    let g = grammar();
    let mut out = Vec::new();
    let negatives: Vec<(usize, usize)> = term_regex(negative)
        .map(|re| re.find_iter(text).map(|m| (m.start(), m.end())).collect())
        .unwrap_or_default();
    for &(s, e) in &negatives {
        out.push(Statement {
            offset: s,
            value: 0,
            token: text[s..e].to_string(),
        });
    }
    if let Some(re) = term_regex(positive) {
        for m in re.find_iter(text) {
            if negatives.iter().any(|&(s, e)| m.start() < e && s < m.end()) {
                continue;
            }
            let clause_start = text[..m.start()]
                .rfind(|c: char| matches!(c, ',' | ';' | ':' | '.' | '!' | '?' | '\n'))
                .map_or(0, |i| i + 1);
            let negated = g.negation.is_match(&text[clause_start..m.start()]);
            out.push(Statement {
                offset: m.start(),
                value: i64::from(!negated),
                token: m.as_str().to_string(),
            });
        }
    }
    if let Some(labels) = label_regex(&q.all_labels()) {
        let yes_no = cached(format!(r"{}\s*[:\-–]?\s*(yes|no|true|false)\b", labels.as_str())).expect("escaped labels");
        for c in yes_no.captures_iter(text) {
            let m = c.get(1).expect("group 1");
            out.push(Statement {
                offset: m.start(),
                value: i64::from(matches!(m.as_str(), "yes" | "true")),
                token: m.as_str().to_string(),
            });
        }
    }
    out.sort_by_key(|s| s.offset);
    out
}

/// Label-bound statements for every scale question.
fn scale_statements(text: &str, scale: &[&QuestionItem]) -> BTreeMap<String, Vec<Statement>> {
    let masked = mask_scale_descriptions(text);
    let mut occurrences: Vec<(usize, usize, &str)> = Vec::new();
    for q in scale {
        if let Some(re) = label_regex(&q.all_labels()) {
            occurrences.extend(re.find_iter(&masked).map(|m| (m.start(), m.end(), q.id.as_str())));
        }
    }
    // Longer labels win where two questions' labels overlap.
    occurrences.sort_by_key(|&(s, e, _)| (s, std::cmp::Reverse(e)));
    let mut kept: Vec<(usize, usize, &str)> = Vec::new();
    for occ in occurrences {
        if kept.last().is_none_or(|last| occ.0 >= last.1) {
            kept.push(occ);
        }
    }
    let mut out: BTreeMap<String, Vec<Statement>> = BTreeMap::new();
    for (from, to) in sentences(&masked) {
        let in_sentence: Vec<&(usize, usize, &str)> = kept.iter().filter(|o| o.0 >= from && o.1 <= to).collect();
        for (k, &&(start, end, qid)) in in_sentence.iter().enumerate() {
            let next = in_sentence.get(k + 1).map_or(to, |o| o.0);
            let forward = answer_numbers(&masked, end, next);
            let statement = match forward.into_iter().next() {
                Some(s) => Some(s),
                None => {
                    let prev = if k == 0 { from } else { in_sentence[k - 1].1 };
                    answer_numbers(&masked, prev, start).pop()
                }
            };
            if let Some(s) = statement {
                out.entry(qid.to_string()).or_default().push(s);
            }
        }
    }
    out
}

/// Unlabeled answer cues ("I'd say 8", "8/10"), last first.
fn cue_statements(text: &str) -> Vec<Statement> {
    let masked = mask_scale_descriptions(text);
    let mut out: Vec<Statement> = grammar()
        .cues
        .captures_iter(&masked)
        .filter_map(|c| {
            let m = c.get(1).or_else(|| c.get(2))?;
            Some(Statement {
                offset: m.start(),
                value: number_value(m.as_str())?,
                token: m.as_str().to_string(),
            })
        })
        .collect();
    out.reverse();
    out
}

pub fn is_refusal(text: &str) -> bool {
    let text = normalize(text);
    grammar().refusal.iter().any(|re| re.is_match(&text))
}

/// The rule-based pass alone. Returns the resolved statements per question.
fn rule_pass(text: &str, questions: &[QuestionItem]) -> BTreeMap<String, Statement> {
    let scale: Vec<&QuestionItem> = questions.iter().filter(|q| matches!(q.kind, AnswerKind::Scale { .. })).collect();
    let mut resolved: BTreeMap<String, Statement> = BTreeMap::new();
    for q in questions {
        if let AnswerKind::Binary { positive, negative } = &q.kind {
            if let Some(s) = binary_statements(text, q, positive, negative).pop() {
                resolved.insert(q.id.clone(), s);
            }
        }
    }
    for (qid, mut statements) in scale_statements(text, &scale) {
        if let Some(s) = statements.pop() {
            resolved.insert(qid, s);
        }
    }
    let unresolved: Vec<&&QuestionItem> = scale.iter().filter(|q| !resolved.contains_key(&q.id)).collect();
    if let [only] = unresolved.as_slice() {
        let claimed: BTreeSet<usize> = resolved.values().map(|s| s.offset).collect();
        if let Some(s) = cue_statements(text).into_iter().find(|s| !claimed.contains(&s.offset)) {
            resolved.insert(only.id.clone(), s);
        }
    }
    resolved
}

/// Rule-based extraction with an optional fallback for unresolved questions.
#[derive(Default)]
pub struct Extractor {
    fallback: Option<Box<dyn FallbackExtractor>>,
}

impl Extractor {
    pub fn rule_based() -> Self {
        Extractor { fallback: None }
    }

    pub fn with_fallback(fallback: Box<dyn FallbackExtractor>) -> Self {
        Extractor {
            fallback: Some(fallback),
        }
    }

    pub fn extract(&self, transcript: &TranscriptRecord, questions: &[QuestionItem]) -> StructuredResponse {
        let trial_id = &transcript.trial_id;
        match transcript.outcome {
            Outcome::Ok => {}
            Outcome::TransportError => {
                let note = transcript.error.clone().unwrap_or_else(|| "transport failure".into());
                return StructuredResponse::invalid(trial_id, InvalidReason::TransportError, note);
            }
            Outcome::Refused => return StructuredResponse::invalid(trial_id, InvalidReason::Refused, "provider refusal"),
            Outcome::Truncated => {
                return StructuredResponse::invalid(trial_id, InvalidReason::Truncated, "completion hit the token limit")
            }
        }
        let text = normalize(&transcript.completion);
        let resolved = rule_pass(&text, questions);
        let mut answers: BTreeMap<String, i64> = resolved.iter().map(|(q, s)| (q.clone(), s.value)).collect();
        let mut evidence: Vec<Evidence> = resolved
            .iter()
            .map(|(q, s)| Evidence {
                question_id: q.clone(),
                value: s.value,
                token: s.token.clone(),
                offset: s.offset,
            })
            .collect();
        evidence.sort_by_key(|e| e.offset);
        let mut method = ExtractionMethod::RuleBased;
        let mut notes = Vec::new();

        let unresolved = |answers: &BTreeMap<String, i64>| -> Vec<&QuestionItem> {
            questions.iter().filter(|q| !answers.contains_key(&q.id)).collect()
        };
        if !unresolved(&answers).is_empty() && is_refusal(&transcript.completion) {
            let mut r = StructuredResponse::invalid(trial_id, InvalidReason::Refused, "refusal language");
            r.evidence = evidence;
            return r;
        }
        if !unresolved(&answers).is_empty() {
            if let Some(fallback) = &self.fallback {
                let missing = unresolved(&answers);
                let found = fallback.extract(&transcript.completion, &missing);
                for q in missing {
                    if let Some(&v) = found.get(&q.id) {
                        answers.insert(q.id.clone(), v);
                        method = ExtractionMethod::PluggableExtractor;
                        notes.push(format!("{} resolved by {}", q.id, fallback.name()));
                    }
                }
            }
        }
        let mut validity = Validity::Valid;
        for q in questions {
            let (lo, hi) = q.bounds();
            match answers.get(&q.id) {
                Some(&v) if v < lo || v > hi => {
                    notes.push(format!("{} = {v} outside [{lo}, {hi}]", q.id));
                    validity = Validity::Invalid(InvalidReason::OutOfRange);
                }
                Some(_) => {}
                None if validity == Validity::Valid => {
                    notes.push(format!("no answer found for {}", q.id));
                    validity = Validity::Invalid(InvalidReason::Unparseable);
                }
                None => notes.push(format!("no answer found for {}", q.id)),
            }
        }
        StructuredResponse {
            trial_id: trial_id.clone(),
            answers,
            validity,
            method,
            notes,
            evidence,
        }
    }
}

/// Rule-based extraction of one transcript.
pub fn extract_structured(transcript: &TranscriptRecord, questions: &[QuestionItem]) -> StructuredResponse {
    Extractor::rule_based().extract(transcript, questions)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub valid: Vec<StructuredResponse>,
    pub rejected: Vec<StructuredResponse>,
    pub tally: BTreeMap<InvalidReason, usize>,
}

pub fn filter_valid(responses: Vec<StructuredResponse>) -> Partition {
    let mut partition = Partition::default();
    for r in responses {
        match r.validity {
            Validity::Valid => partition.valid.push(r),
            Validity::Invalid(reason) => {
                *partition.tally.entry(reason).or_default() += 1;
                partition.rejected.push(r);
            }
        }
    }
    partition
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub trial_id: String,
    pub raw_excerpt: String,
    pub extracted: String,
    pub human_verdict: String,
}

const EXCERPT_CHARS: usize = 1200;

fn describe(response: &StructuredResponse) -> String {
    match response.validity {
        Validity::Valid => response
            .answers
            .iter()
            .map(|(q, v)| format!("{q}={v}"))
            .collect::<Vec<_>>()
            .join("; "),
        Validity::Invalid(reason) => format!("invalid: {reason}"),
    }
}

/// Seeded uniform sample of `k` responses without replacement, paired with
/// their raw completions. Rows follow the input order.
pub fn audit_sample(
    responses: &[StructuredResponse],
    transcripts: &[TranscriptRecord],
    k: usize,
    seed: u64,
) -> Result<Vec<AuditRow>, ExtractionError> {
    let n = responses.len();
    if k > n {
        return Err(ExtractionError::SampleTooLarge { k, n });
    }
    let mut rng = seed::rng_for(seed, &["audit"]);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + seed::index(&mut rng, n - i);
        indices.swap(i, j);
    }
    let mut chosen = indices[..k].to_vec();
    chosen.sort_unstable();
    let by_id: BTreeMap<&str, &TranscriptRecord> = transcripts.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    chosen
        .into_iter()
        .map(|i| {
            let r = &responses[i];
            let t = by_id
                .get(r.trial_id.as_str())
                .ok_or_else(|| ExtractionError::MissingTranscript(r.trial_id.clone()))?;
            Ok(AuditRow {
                trial_id: r.trial_id.clone(),
                raw_excerpt: t.completion.chars().take(EXCERPT_CHARS).collect(),
                extracted: describe(r),
                human_verdict: String::new(),
            })
        })
        .collect()
}

pub fn write_audit_worksheet(path: &Path, rows: &[AuditRow]) -> Result<(), ExtractionError> {
    let err = |source| ExtractionError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if rows.is_empty() {
        w.write_record(["trial_id", "raw_excerpt", "extracted", "human_verdict"]).map_err(err)?;
    }
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn read_audit_worksheet(path: &Path) -> Result<Vec<AuditRow>, ExtractionError> {
    let err = |source| ExtractionError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict() -> QuestionItem {
        QuestionItem {
            id: "negligent".into(),
            prompt: "Was the defendant negligent?".into(),
            kind: AnswerKind::Binary {
                positive: "negligent".into(),
                negative: "not negligent".into(),
            },
            scale_meaning: String::new(),
            labels: vec!["verdict".into()],
        }
    }

    fn scale(id: &str, lo: i64, hi: i64) -> QuestionItem {
        QuestionItem {
            id: id.into(),
            prompt: "How sure?".into(),
            kind: AnswerKind::Scale { lo, hi },
            scale_meaning: String::new(),
            labels: vec![],
        }
    }

    fn transcript(text: &str) -> TranscriptRecord {
        TranscriptRecord {
            trial_id: "t".into(),
            session_id: "s".into(),
            provider_id: "m".into(),
            request: ChatRequest {
                model: "m".into(),
                messages: vec![ChatMessage::user("x")],
                temperature: 1.0,
                max_tokens: 10,
            },
            completion: text.into(),
            requested_at_ms: 0,
            responded_at_ms: 0,
            attempts: 1,
            outcome: Outcome::Ok,
            error: None,
        }
    }

    fn run(text: &str) -> StructuredResponse {
        extract_structured(&transcript(text), &[verdict(), scale("confidence", 0, 10)])
    }

    #[test]
    fn canonical_pattern() {
        let r = run("She was negligent. My confidence is 8 out of 10.");
        assert_eq!(r.validity, Validity::Valid);
        assert_eq!(r.answers["negligent"], 1);
        assert_eq!(r.answers["confidence"], 8);
    }

    #[test]
    fn negation_and_zero() {
        let r = run("Not negligent. Confidence 0.");
        assert_eq!((r.answers["negligent"], r.answers["confidence"]), (0, 0));
        let r = run("I do not think the driver was negligent, confidence: 6/10");
        assert_eq!((r.answers["negligent"], r.answers["confidence"]), (0, 6));
    }

    #[test]
    fn last_statement_wins() {
        let r = run("At first I thought negligent, confidence 3. On reflection, not negligent. Confidence: 7.");
        assert_eq!((r.answers["negligent"], r.answers["confidence"]), (0, 7));
    }

    #[test]
    fn words_and_cues() {
        let r = run("Verdict: negligent. I'd say eight.");
        assert_eq!(r.answers["confidence"], 8);
        let r = run("Negligent. Confidence (0-10): ten");
        assert_eq!(r.answers["confidence"], 10);
        let r = run("Verdict: yes. 9/10 sure about that.");
        assert_eq!((r.answers["negligent"], r.answers["confidence"]), (1, 9));
    }

    #[test]
    fn refusal() {
        let r = run("I refuse to roleplay this.");
        assert_eq!(r.validity, Validity::Invalid(InvalidReason::Refused));
    }

    #[test]
    fn out_of_range_is_not_clamped() {
        let r = run("Negligent. Confidence: 12.");
        assert_eq!(r.validity, Validity::Invalid(InvalidReason::OutOfRange));
        assert_eq!(r.answers["confidence"], 12);
        let r = run("Negligent. Confidence: -2.");
        assert_eq!(r.validity, Validity::Invalid(InvalidReason::OutOfRange));
    }

    #[test]
    fn decimals_are_not_integers() {
        let r = run("Negligent. Confidence: 7.5");
        assert_eq!(r.validity, Validity::Invalid(InvalidReason::Unparseable));
    }

    #[test]
    fn several_scales_in_one_sentence() {
        let qs = [scale("enforceability", 1, 7), scale("fairness", 1, 7), scale("consent", 1, 7)];
        let t = transcript("On a scale of 1 to 7: enforceability 5, fairness 3 and consent at 2.");
        let r = extract_structured(&t, &qs);
        assert_eq!(r.validity, Validity::Valid);
        assert_eq!(
            r.answers,
            BTreeMap::from([("consent".into(), 2), ("enforceability".into(), 5), ("fairness".into(), 3)])
        );
    }

    #[test]
    fn non_ok_outcomes() {
        let mut t = transcript("");
        t.outcome = Outcome::Truncated;
        assert_eq!(
            extract_structured(&t, &[verdict()]).validity,
            Validity::Invalid(InvalidReason::Truncated)
        );
        t.outcome = Outcome::TransportError;
        assert_eq!(
            extract_structured(&t, &[verdict()]).validity,
            Validity::Invalid(InvalidReason::TransportError)
        );
    }

    struct Sevens;
    impl FallbackExtractor for Sevens {
        fn name(&self) -> &str {
            "sevens"
        }
        fn extract(&self, _text: &str, unresolved: &[&QuestionItem]) -> BTreeMap<String, i64> {
            unresolved.iter().map(|q| (q.id.clone(), 7)).collect()
        }
    }

    #[test]
    fn fallback_is_recorded() {
        let r = Extractor::with_fallback(Box::new(Sevens)).extract(&transcript("Negligent, clearly."), &[verdict(), scale("confidence", 0, 10)]);
        assert_eq!(r.validity, Validity::Valid);
        assert_eq!(r.method, ExtractionMethod::PluggableExtractor);
        assert_eq!(r.answers["confidence"], 7);
    }

    #[test]
    fn audit_rejects_oversized_sample() {
        let r = run("Negligent. Confidence 5.");
        let err = audit_sample(&[r], &[transcript("x")], 2, 1).unwrap_err();
        assert!(matches!(err, ExtractionError::SampleTooLarge { k: 2, n: 1 }));
    }
}
