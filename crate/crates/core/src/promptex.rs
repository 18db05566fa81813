//! Clinical yes/no question prompt, LLM transports and answer parsing.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::evalkit::{cohen_kappa, YesNo};

pub const DEFAULT_PREAMBLE: &str = "I want you to act like a doctor. I will give you summary of a patient's stay in the hospital you will evaluate it and answer a set of questions as yes or no.";

pub const DEFAULT_INSTRUCTION: &str = "Only return the answers, next to indices number and not the questions.";

pub const DEFAULT_QUESTIONS: [&str; 12] = [
    "Is there any mention of consultation by nephrologist for this patient",
    "Is it mentioned that the patient has Acute Kidney Injury (AKI)",
    "Was the patient put under General Anaesthesia at any point",
    "Has hypertension been mentioned as a previously existing condition in the patient",
    "Has the patient been advised to reduce fluid intake",
    "Has this patient undergone angiography",
    "Is the patient being given any diuretic",
    "Has the patient undergone any imaging procedure using contrast dye",
    "As per this summary was the patient ever admitted to the ICU",
    "Was the patient put on Ventilator during his/her stay in the hospital",
    "Did the patient develop Tachycardia at any point during his/her stay in the hospital",
    "Is there any mention of drop in Oxygen saturation",
];

/// Short display names for the default questions, same order.
pub const FEATURE_NAMES: [&str; 12] = [
    "Consultation by Nephrologist",
    "AKI Mentioned",
    "General Anaesthesia",
    "Hypertension",
    "Fluid Restriction Advised",
    "Angiography Done",
    "Diuretic Given",
    "Imaging Procedure with Contrast",
    "ICU Admission",
    "Ventilator Used",
    "Tachycardia",
    "Oxygen Saturation Drop",
];

/// Column keys for the default questions, same order.
pub const FEATURE_KEYS: [&str; 12] = [
    "nephrologist_consult",
    "aki",
    "general_anaesthesia",
    "hypertension",
    "fluid_restriction",
    "angiography",
    "diuretic",
    "contrast_imaging",
    "icu_admission",
    "ventilator",
    "tachycardia",
    "oxygen_drop",
];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("course text is empty")]
    EmptyCourseText,
    #[error("template has no questions")]
    NoQuestions,
    #[error("question {0} is blank")]
    BlankQuestion(usize),
    #[error("no answer for question {0}")]
    MissingIndex(usize),
    #[error("question {0} answered twice")]
    DuplicateIndex(usize),
    #[error("answer index {index} outside 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("cannot parse answer line {0:?}")]
    UnparseableToken(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub preamble: String,
    pub questions: Vec<String>,
    pub answer_instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            preamble: DEFAULT_PREAMBLE.to_string(),
            questions: DEFAULT_QUESTIONS.iter().map(|q| q.to_string()).collect(),
            answer_instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.questions.is_empty() {
            return Err(PromptError::NoQuestions);
        }
        if let Some(i) = self.questions.iter().position(|q| q.trim().is_empty()) {
            return Err(PromptError::BlankQuestion(i + 1));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

/// Preamble, course text, the numbered questions and the answer instruction,
/// separated by blank lines.
pub fn build_prompt(t: &PromptTemplate, course_text: &str) -> Result<String, PromptError> {
    t.validate()?;
    if course_text.trim().is_empty() {
        return Err(PromptError::EmptyCourseText);
    }
    let mut out = String::new();
    out.push_str(&t.preamble);
    out.push_str("\n\n");
    out.push_str(course_text);
    out.push_str("\n\n");
    for (i, q) in t.questions.iter().enumerate() {
        writeln!(out, "{}. {}", i + 1, q.trim()).expect("write to string");
    }
    out.push('\n');
    out.push_str(&t.answer_instruction);
    Ok(out)
}

static ANSWER_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:q(?:uestion)?\s*)?(\d+)\s*[.:)\-]?\s*(yes|no)\b[\s.!]*").expect("valid regex")
});

/// Parses one answer per line in forms like `1. Yes`, `2: no` or `3) YES`.
/// Blank lines are skipped; anything else is an error.
pub fn parse_answers(raw: &str, n: usize) -> Result<Vec<YesNo>, PromptError> {
    let mut slots: Vec<Option<YesNo>> = vec![None; n];
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let caps = ANSWER_LINE
            .captures(line)
            .ok_or_else(|| PromptError::UnparseableToken(line.to_string()))?;
        let idx: usize = caps[1]
            .parse()
            .map_err(|_| PromptError::UnparseableToken(line.to_string()))?;
        if idx == 0 || idx > n {
            return Err(PromptError::IndexOutOfRange { index: idx, n });
        }
        let ans = if caps[2].eq_ignore_ascii_case("yes") {
            YesNo::Yes
        } else {
            YesNo::No
        };
        if slots[idx - 1].replace(ans).is_some() {
            return Err(PromptError::DuplicateIndex(idx));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or(PromptError::MissingIndex(i + 1)))
        .collect()
}

/// Canonical `k. Yes` / `k. No` lines.
pub fn format_answers(answers: &[YesNo]) -> String {
    answers
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{}. {}", i + 1, if a.is_yes() { "Yes" } else { "No" }))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            timeout_secs: 30,
            max_retries: 3,
            api_key_env: "MEDEX_LLM_API_KEY".into(),
            max_in_flight: 4,
            backoff_ms: 200,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err("temperature must be >= 0".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be >= 1".into());
        }
        if self.timeout_secs == 0 {
            return Err("timeout_secs must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("request failed: {0}")]
    Request(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("no scripted response for {0}")]
    Unscripted(String),
}

/// One completion request.
#[derive(Debug, Clone, Copy)]
pub struct Completion<'a> {
    pub doc_id: &'a str,
    pub prompt: &'a str,
    /// 1 or 2.
    pub run_index: u8,
    /// Number of numbered questions in `prompt`.
    pub n_questions: usize,
}

pub trait LlmTransport: Send + Sync {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError>;
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    model: &'a str,
    temperature: f64,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    #[serde(alias = "completion")]
    text: String,
}

/// Live JSON-over-HTTP completion client.
pub struct HttpTransport {
    cfg: LlmConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .new_agent();
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Self { cfg, agent, api_key }
    }
}

impl LlmTransport for HttpTransport {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError> {
        let body = HttpRequest {
            model: &self.cfg.model,
            temperature: self.cfg.temperature,
            prompt: req.prompt,
        };
        tracing::debug!(
            doc_id = req.doc_id,
            run = req.run_index,
            model = %self.cfg.model,
            prompt_chars = req.prompt.len(),
            "llm request"
        );
        let mut call = self.agent.post(&self.cfg.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(&body)
            .map_err(|e| TransportError::Request(e.to_string()))?;
        let parsed: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::BadResponse(e.to_string()))?;
        tracing::debug!(doc_id = req.doc_id, response = %parsed.text, "llm response");
        Ok(parsed.text)
    }
}

/// Offline transport answering from a per-document script.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    script: HashMap<String, [String; 2]>,
    fallback: Option<String>,
    calls: AtomicUsize,
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same response for both runs.
    pub fn insert(&mut self, doc_id: impl Into<String>, response: impl Into<String>) {
        let r = response.into();
        self.script.insert(doc_id.into(), [r.clone(), r]);
    }

    pub fn insert_runs(&mut self, doc_id: impl Into<String>, run1: impl Into<String>, run2: impl Into<String>) {
        self.script.insert(doc_id.into(), [run1.into(), run2.into()]);
    }

    /// Response for documents without a script entry.
    pub fn with_fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    /// Loads `{doc_id: response}` or `{doc_id: [run1, run2]}` JSON.
    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Entry {
            One(String),
            Two([String; 2]),
        }
        let raw: BTreeMap<String, Entry> = serde_json::from_slice(bytes)?;
        let mut t = Self::new();
        for (k, v) in raw {
            match v {
                Entry::One(r) => t.insert(k, r),
                Entry::Two([a, b]) => t.insert_runs(k, a, b),
            }
        }
        Ok(t)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let sorted: BTreeMap<&String, &[String; 2]> = self.script.iter().collect();
        serde_json::to_vec_pretty(&sorted).expect("script serializes")
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl LlmTransport for ScriptedTransport {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.script.get(req.doc_id) {
            Some(runs) => Ok(runs[usize::from(req.run_index.clamp(1, 2)) - 1].clone()),
            None => self
                .fallback
                .clone()
                .ok_or_else(|| TransportError::Unscripted(req.doc_id.to_string())),
        }
    }
}

/// Offline transport that answers from a per-document YES/NO key, sized to
/// the request's question count. Questions beyond the key, and documents
/// without one, are answered `No`.
#[derive(Debug, Default, Clone)]
pub struct AnswerKeyTransport {
    keys: HashMap<String, [Vec<YesNo>; 2]>,
}

impl AnswerKeyTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, answers: Vec<YesNo>) {
        self.keys.insert(doc_id.into(), [answers.clone(), answers]);
    }

    pub fn insert_runs(&mut self, doc_id: impl Into<String>, run1: Vec<YesNo>, run2: Vec<YesNo>) {
        self.keys.insert(doc_id.into(), [run1, run2]);
    }

    /// Loads `{doc_id: ["YES", ...]}`, or `{doc_id: {"run1": [...], "run2": [...]}}`
    /// for documents whose runs differ.
    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Entry {
            One(Vec<YesNo>),
            Two { run1: Vec<YesNo>, run2: Vec<YesNo> },
        }
        let raw: BTreeMap<String, Entry> = serde_json::from_slice(bytes)?;
        let mut t = Self::new();
        for (k, v) in raw {
            match v {
                Entry::One(a) => t.insert(k, a),
                Entry::Two { run1, run2 } => t.insert_runs(k, run1, run2),
            }
        }
        Ok(t)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let sorted: BTreeMap<&String, serde_json::Value> = self
            .keys
            .iter()
            .map(|(k, [a, b])| {
                let v = if a == b {
                    serde_json::json!(a)
                } else {
                    serde_json::json!({"run1": a, "run2": b})
                };
                (k, v)
            })
            .collect();
        serde_json::to_vec_pretty(&sorted).expect("key serializes")
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

impl LlmTransport for AnswerKeyTransport {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError> {
        let key = self
            .keys
            .get(req.doc_id)
            .map(|runs| runs[usize::from(req.run_index.clamp(1, 2)) - 1].as_slice())
            .unwrap_or(&[]);
        let answers: Vec<YesNo> = (0..req.n_questions)
            .map(|i| key.get(i).copied().unwrap_or(YesNo::No))
            .collect();
        Ok(format_answers(&answers))
    }
}

/// Caps concurrent in-flight requests on an inner transport.
pub struct RateLimited<T> {
    inner: T,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

impl<T: LlmTransport> RateLimited<T> {
    pub fn new(inner: T, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    /// Highest number of simultaneous requests observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<T: LlmTransport> LlmTransport for RateLimited<T> {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError> {
        {
            let mut n = self.in_flight.lock().expect("rate limiter poisoned");
            while *n >= self.limit {
                n = self.freed.wait(n).expect("rate limiter poisoned");
            }
            *n += 1;
            self.peak.fetch_max(*n, Ordering::SeqCst);
        }
        let out = self.inner.complete(req);
        *self.in_flight.lock().expect("rate limiter poisoned") -= 1;
        self.freed.notify_one();
        out
    }
}

impl<T: LlmTransport + ?Sized> LlmTransport for Arc<T> {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError> {
        (**self).complete(req)
    }
}

impl<T: LlmTransport + ?Sized> LlmTransport for Box<T> {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError> {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureAnswers {
    pub doc_id: String,
    pub answers: Vec<YesNo>,
    pub raw_response: String,
    pub run_index: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRuns {
    pub run1: FeatureAnswers,
    pub run2: FeatureAnswers,
    /// Per question, whether the two runs gave the same answer.
    pub agreement: Vec<bool>,
}

impl FeatureRuns {
    /// 1-based indices of questions where the runs differ.
    pub fn disagreements(&self) -> Vec<usize> {
        self.agreement
            .iter()
            .enumerate()
            .filter(|(_, a)| !**a)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: TransportError },
    #[error("run {run}: {source}")]
    Parse { run: u8, source: PromptError },
}

fn complete_with_retry(
    transport: &dyn LlmTransport,
    cfg: &LlmConfig,
    req: Completion<'_>,
) -> Result<String, ExtractError> {
    let mut attempt = 0;
    loop {
        match transport.complete(req) {
            Ok(r) => return Ok(r),
            Err(e) if attempt >= cfg.max_retries => {
                return Err(ExtractError::Transport {
                    attempts: attempt + 1,
                    last: e,
                })
            }
            Err(e) => {
                let wait = cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                tracing::warn!(doc_id = req.doc_id, attempt, error = %e, wait_ms = wait, "llm retry");
                std::thread::sleep(Duration::from_millis(wait));
                attempt += 1;
            }
        }
    }
}

/// Queries the transport twice for one document and parses both responses.
pub fn extract_features(
    doc_id: &str,
    course_text: &str,
    t: &PromptTemplate,
    cfg: &LlmConfig,
    transport: &dyn LlmTransport,
) -> Result<FeatureRuns, ExtractError> {
    let prompt = build_prompt(t, course_text)?;
    let n = t.questions.len();
    let mut runs = Vec::with_capacity(2);
    for run_index in 1..=2u8 {
        let raw = complete_with_retry(
            transport,
            cfg,
            Completion {
                doc_id,
                prompt: &prompt,
                run_index,
                n_questions: n,
            },
        )?;
        let answers = parse_answers(&raw, n).map_err(|source| ExtractError::Parse { run: run_index, source })?;
        runs.push(FeatureAnswers {
            doc_id: doc_id.to_string(),
            answers,
            raw_response: raw,
            run_index,
        });
    }
    let run2 = runs.pop().expect("two runs");
    let run1 = runs.pop().expect("two runs");
    let agreement = run1.answers.iter().zip(&run2.answers).map(|(a, b)| a == b).collect();
    Ok(FeatureRuns { run1, run2, agreement })
}

/// Per-question kappa between run 1 and run 2 across documents.
pub fn intra_model_kappa(runs: &[FeatureRuns]) -> Vec<f64> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    (0..first.run1.answers.len())
        .map(|q| {
            let a: Vec<YesNo> = runs.iter().map(|r| r.run1.answers[q]).collect();
            let b: Vec<YesNo> = runs.iter().map(|r| r.run2.answers[q]).collect();
            cohen_kappa(&a, &b).expect("equal non-empty vectors")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use YesNo::{No as N, Yes as Y};

    #[test]
    fn default_prompt_contains_first_and_last_question() {
        let p = build_prompt(&PromptTemplate::default(), "Patient stable.").unwrap();
        assert!(p.contains("1. Is there any mention of consultation by nephrologist"));
        assert!(p.contains("12. Is there any mention of drop in Oxygen saturation"));
        assert!(p.starts_with("I want you to act like a doctor."));
        assert!(p.ends_with("Only return the answers, next to indices number and not the questions."));
        assert!(p.contains("Patient stable."));
    }

    #[test]
    fn single_question_template() {
        let t = PromptTemplate {
            questions: vec!["Was the patient discharged".into()],
            ..PromptTemplate::default()
        };
        let p = build_prompt(&t, "x").unwrap();
        let numbered = p.lines().filter(|l| ANSWER_INDEX.is_match(l)).count();
        assert_eq!(numbered, 1);
    }

    static ANSWER_INDEX: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+\. ").unwrap());

    #[test]
    fn empty_course_rejected() {
        assert_eq!(
            build_prompt(&PromptTemplate::default(), "  \n"),
            Err(PromptError::EmptyCourseText)
        );
        let t = PromptTemplate {
            questions: vec![],
            ..PromptTemplate::default()
        };
        assert_eq!(build_prompt(&t, "x"), Err(PromptError::NoQuestions));
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_answers("1. Yes\n2. No", 2).unwrap(), vec![Y, N]);
        assert_eq!(parse_answers("2. no\n1. YES", 2).unwrap(), vec![Y, N]);
        assert_eq!(parse_answers("1. Yes", 2), Err(PromptError::MissingIndex(2)));
        assert_eq!(parse_answers("1: no\n2) YES\n", 2).unwrap(), vec![N, Y]);
        assert_eq!(parse_answers("1. Yes\n1. No", 2), Err(PromptError::DuplicateIndex(1)));
        assert_eq!(
            parse_answers("3. Yes", 2),
            Err(PromptError::IndexOutOfRange { index: 3, n: 2 })
        );
        assert!(matches!(
            parse_answers("1. maybe", 1),
            Err(PromptError::UnparseableToken(_))
        ));
    }

    #[test]
    fn format_parse_round_trip() {
        let a = vec![Y, N, N, Y];
        assert_eq!(parse_answers(&format_answers(&a), 4).unwrap(), a);
    }

    #[test]
    fn scripted_runs_and_disagreement() {
        let t = PromptTemplate::default();
        let cfg = LlmConfig::default();
        let same = format_answers(&[N; 12]);
        let mut diff = [N; 12];
        diff[2] = Y;
        let mut mock = ScriptedTransport::new();
        mock.insert("a", same.clone());
        mock.insert_runs("b", same, format_answers(&diff));
        let ra = extract_features("a", "course", &t, &cfg, &mock).unwrap();
        assert_eq!(ra.run1.answers, ra.run2.answers);
        assert!(ra.disagreements().is_empty());
        let rb = extract_features("b", "course", &t, &cfg, &mock).unwrap();
        assert_eq!(rb.disagreements(), vec![3]);
        assert_eq!(mock.call_count(), 4);
    }

    struct Flaky {
        fails: AtomicUsize,
    }

    impl LlmTransport for Flaky {
        fn complete(&self, _req: Completion<'_>) -> Result<String, TransportError> {
            if self.fails.load(Ordering::SeqCst) > 0 {
                self.fails.fetch_sub(1, Ordering::SeqCst);
                return Err(TransportError::Request("boom".into()));
            }
            Ok("1. yes".into())
        }
    }

    #[test]
    fn retries_then_gives_up() {
        let t = PromptTemplate {
            questions: vec!["q".into()],
            ..PromptTemplate::default()
        };
        let cfg = LlmConfig {
            max_retries: 2,
            backoff_ms: 1,
            ..LlmConfig::default()
        };
        let ok = Flaky {
            fails: AtomicUsize::new(2),
        };
        assert!(extract_features("d", "c", &t, &cfg, &ok).is_ok());
        let bad = Flaky {
            fails: AtomicUsize::new(100),
        };
        assert!(matches!(
            extract_features("d", "c", &t, &cfg, &bad),
            Err(ExtractError::Transport { attempts: 3, .. })
        ));
    }

    #[test]
    fn script_json_round_trip() {
        let mut m = ScriptedTransport::new();
        m.insert("x", "1. Yes");
        m.insert_runs("y", "1. No", "1. Yes");
        let back = ScriptedTransport::from_json(&m.to_json()).unwrap();
        assert_eq!(back.script, m.script);
        let short = ScriptedTransport::from_json(br#"{"z": "1. No"}"#).unwrap();
        assert_eq!(short.len(), 1);
    }

    #[test]
    fn rate_limit_caps_concurrency() {
        struct Slow;
        impl LlmTransport for Slow {
            fn complete(&self, _req: Completion<'_>) -> Result<String, TransportError> {
                std::thread::sleep(Duration::from_millis(20));
                Ok(String::new())
            }
        }
        let rl = Arc::new(RateLimited::new(Slow, 2));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let rl = Arc::clone(&rl);
                std::thread::spawn(move || {
                    rl.complete(Completion {
                        doc_id: "d",
                        prompt: "p",
                        run_index: 1,
                        n_questions: 0,
                    })
                    .unwrap();
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(rl.peak_in_flight() <= 2);
        assert!(rl.peak_in_flight() >= 1);
    }

    #[test]
    fn kappa_over_batch() {
        let t = PromptTemplate::default();
        let cfg = LlmConfig::default();
        let mut mock = ScriptedTransport::new();
        for i in 0..6 {
            let a: Vec<YesNo> = (0..12).map(|q| YesNo::from_bool((i + q) % 3 == 0)).collect();
            mock.insert(format!("d{i}"), format_answers(&a));
        }
        let runs: Vec<FeatureRuns> = (0..6)
            .map(|i| extract_features(&format!("d{i}"), "c", &t, &cfg, &mock).unwrap())
            .collect();
        assert!(intra_model_kappa(&runs).iter().all(|&k| k == 1.0));
    }

    #[test]
    fn http_body_shape() {
        let v = serde_json::to_value(HttpRequest {
            model: "m",
            temperature: 0.0,
            prompt: "p",
        })
        .unwrap();
        assert_eq!(v, serde_json::json!({"model": "m", "temperature": 0.0, "prompt": "p"}));
        let r: HttpResponse = serde_json::from_str(r#"{"completion": "1. Yes"}"#).unwrap();
        assert_eq!(r.text, "1. Yes");
    }

    #[test]
    fn answer_key_follows_template_length() {
        let key = br#"{"a": ["YES", "NO", "YES"], "b": {"run1": ["YES"], "run2": ["NO"]}}"#;
        let mock = AnswerKeyTransport::from_json(key).unwrap();
        let mut t = PromptTemplate::default();
        t.questions.push("Was the patient discharged home?".into());
        let cfg = LlmConfig::default();
        let runs = extract_features("a", "course", &t, &cfg, &mock).unwrap();
        assert_eq!(runs.run1.answers.len(), 13);
        assert_eq!(&runs.run1.answers[..3], &[YesNo::Yes, YesNo::No, YesNo::Yes]);
        assert!(runs.run1.answers[3..].iter().all(|a| *a == YesNo::No));
        let b = extract_features("b", "course", &t, &cfg, &mock).unwrap();
        assert_eq!(b.disagreements(), vec![1]);
        let back = AnswerKeyTransport::from_json(&mock.to_json()).unwrap();
        assert_eq!(back.len(), 2);
        let unknown = extract_features("zzz", "course", &t, &cfg, &mock).unwrap();
        assert!(unknown.run1.answers.iter().all(|a| *a == YesNo::No));
    }
}
