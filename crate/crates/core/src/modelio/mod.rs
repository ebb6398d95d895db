//! Uniform client over text-model backends: summary generation with a
//! reasoning trace, pairwise judging with calibrated probabilities, per-token
//! policy log-probabilities and embeddings.
//!
//! A [`Backend`] speaks one wire protocol (chat-completion HTTP, or one of the
//! scripted mocks). [`Client`] wraps a backend with an endpoint's limits:
//! bounded retries with exponential backoff, an in-flight request limiter,
//! left truncation of prompts and telemetry.

#[cfg(feature = "http")]
pub mod http;
pub mod mock;
pub mod parse;
pub mod templates;

use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::PreferenceSummary;
use crate::error::{Error, Result};
use crate::telemetry::Telemetry;

pub use parse::Choice;

/// Upper bound accepted for `retry_limit` in endpoint configuration.
pub const MAX_RETRY_LIMIT: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Judge,
    Merger,
    Embedder,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub max_prompt_tokens: usize,
    pub max_response_tokens: usize,
    pub retry_limit: u32,
    pub max_in_flight: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_prompt_tokens: 8192,
            max_response_tokens: 4096,
            retry_limit: 3,
            max_in_flight: 8,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

/// One configured model endpoint, as read from an endpoint TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env_var: Option<String>,
    pub role: Role,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_open")]
    pub reasoning_open: String,
    #[serde(default = "default_close")]
    pub reasoning_close: String,
    /// Samples drawn when a judge backend exposes no logprobs.
    #[serde(default = "default_judge_samples")]
    pub judge_samples: usize,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    /// Forwarded to servers that support toggling a thinking mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinking: Option<bool>,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_open() -> String {
    "<think>".into()
}
fn default_close() -> String {
    "</think>".into()
}
fn default_judge_samples() -> usize {
    8
}
fn default_top_logprobs() -> usize {
    5
}

impl ModelEndpoint {
    /// Endpoint with default limits, mostly useful for mocks and tests.
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>, role: Role) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key_env_var: None,
            role,
            limits: Limits::default(),
            temperature: default_temperature(),
            reasoning_open: default_open(),
            reasoning_close: default_close(),
            judge_samples: default_judge_samples(),
            top_logprobs: default_top_logprobs(),
            thinking: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let endpoint: ModelEndpoint =
            toml::from_str(text).map_err(|e| Error::config(format!("endpoint config: {e}")))?;
        endpoint.validate()?;
        Ok(endpoint)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.limits;
        if l.max_prompt_tokens == 0 || l.max_response_tokens == 0 {
            return Err(Error::config("token limits must be positive"));
        }
        if l.retry_limit > MAX_RETRY_LIMIT {
            return Err(Error::config(format!(
                "retry_limit {} exceeds maximum {MAX_RETRY_LIMIT}",
                l.retry_limit
            )));
        }
        if l.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be positive"));
        }
        if self.judge_samples == 0 {
            return Err(Error::config("judge_samples must be positive"));
        }
        if self.reasoning_open.is_empty() || self.reasoning_close.is_empty() {
            return Err(Error::config("reasoning delimiters must be non-empty"));
        }
        Ok(())
    }
}

/// One generated token with its logprob and top-k alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    /// Sampling nonce; distinct values request distinct samples.
    pub sample: u64,
    pub logprobs: bool,
    pub top_logprobs: usize,
    pub thinking: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Per-token detail when the backend reports logprobs.
    pub tokens: Option<Vec<TokenInfo>>,
}

/// A wire-level model backend. Transient transport failures must be
/// reported as [`Error::Backend`]; the client retries only those.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion>;

    /// Log-probability of each token of `response` following `prompt`.
    fn sequence_logprobs(&self, _prompt: &str, _response: &str) -> Result<Vec<f64>> {
        Err(Error::Capability("backend cannot score sequences".into()))
    }

    fn embed(&self, _text: &str) -> Result<Vec<f64>> {
        Err(Error::Capability("backend cannot embed".into()))
    }
}

/// Splits text into tokens for budgeting. Backends tokenize for real; this
/// only needs to be a consistent approximation.
pub trait TokenCounter: Send + Sync {
    fn split<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count(&self, text: &str) -> usize {
        self.split(text).len()
    }
}

/// Word-level pieces: each piece is leading whitespace plus one word, so
/// concatenating the pieces reproduces the input.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut prev_ws = true;
        let mut seen_word = false;
        for (i, c) in text.char_indices() {
            let ws = c.is_whitespace();
            if prev_ws && !ws {
                if seen_word {
                    pieces.push(&text[start..i]);
                    start = i;
                }
                seen_word = true;
            }
            prev_ws = ws;
        }
        if start < text.len() {
            pieces.push(&text[start..]);
        }
        pieces
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub summary: String,
    /// The full completion text (reasoning plus summary) as returned.
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// Probability that the first-listed item is preferred.
    pub prob_first: f64,
    /// `(lp_A, lp_B)` per issued order; empty when sampled.
    pub raw_logprobs: Vec<(f64, f64)>,
    pub order_debiased: bool,
    /// True when estimated from sampled selections instead of logprobs.
    pub sampled: bool,
}

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter lock poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter lock poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter lock poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// Endpoint-bound client. Cheap to clone; clones share limiter and telemetry.
#[derive(Clone)]
pub struct Client {
    endpoint: ModelEndpoint,
    backend: Arc<dyn Backend>,
    counter: Arc<dyn TokenCounter>,
    limiter: Arc<Limiter>,
    telemetry: Arc<Telemetry>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("base_url", &self.endpoint.base_url)
            .field("model_id", &self.endpoint.model_id)
            .finish()
    }
}

impl Client {
    pub fn new(endpoint: ModelEndpoint, backend: Arc<dyn Backend>) -> Result<Self> {
        endpoint.validate()?;
        Ok(Self {
            limiter: Arc::new(Limiter::new(endpoint.limits.max_in_flight)),
            endpoint,
            backend,
            counter: Arc::new(WhitespaceTokens),
            telemetry: Arc::new(Telemetry::new()),
        })
    }

    /// Resolves the backend from the endpoint's URL scheme: `mock:hash`,
    /// `mock:simlab`, or an `http(s)` chat-completion server.
    pub fn connect(endpoint: ModelEndpoint) -> Result<Self> {
        let backend = connect_backend(&endpoint)?;
        Self::new(endpoint, backend)
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn with_telemetry(mut self, telemetry: Arc<Telemetry>) -> Self {
        self.telemetry = telemetry;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn telemetry(&self) -> &Arc<Telemetry> {
        &self.telemetry
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    fn call<T>(&self, op: impl Fn(&dyn Backend) -> Result<T>) -> Result<T> {
        let _permit = self.limiter.acquire();
        let limit = self.endpoint.limits.retry_limit;
        let mut attempt = 0;
        loop {
            self.telemetry.incr("attempts");
            match op(self.backend.as_ref()) {
                Err(Error::Backend(msg)) if attempt < limit => {
                    self.telemetry.incr("retries");
                    let delay = self.endpoint.limits.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!(
                        "{}: attempt {} failed ({msg}); retrying in {delay} ms",
                        self.endpoint.model_id,
                        attempt + 1
                    );
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Drops tokens from the left of `prompt` until it fits the endpoint's
    /// prompt budget.
    pub fn left_truncate(&self, prompt: &str) -> String {
        let max = self.endpoint.limits.max_prompt_tokens;
        let pieces = self.counter.split(prompt);
        if pieces.len() <= max {
            return prompt.to_string();
        }
        self.note_truncation(pieces.len(), max);
        pieces[pieces.len() - max..].concat().trim_start().to_string()
    }

    fn note_truncation(&self, have: usize, max: usize) {
        self.telemetry.incr("truncations");
        log::info!(
            "{}: prompt of {have} tokens left-truncated to {max}",
            self.endpoint.model_id
        );
    }

    /// Renders `render(history)` and, if it exceeds the prompt budget,
    /// left-truncates the history text first so the instructions survive.
    pub fn render_fitted(&self, history: &str, render: impl Fn(&str) -> String) -> String {
        let max = self.endpoint.limits.max_prompt_tokens;
        let prompt = render(history);
        let total = self.counter.count(&prompt);
        if total <= max {
            return prompt;
        }
        let pieces = self.counter.split(history);
        let excess = total - max;
        if excess < pieces.len() {
            self.note_truncation(total, max);
            let kept = pieces[excess..].concat();
            let fitted = render(kept.trim_start());
            if self.counter.count(&fitted) <= max {
                return fitted;
            }
        }
        self.left_truncate(&prompt)
    }

    pub fn complete(&self, prompt: &str, sample: u64, logprobs: bool) -> Result<Completion> {
        let request = CompletionRequest {
            prompt: self.left_truncate(prompt),
            max_tokens: self.endpoint.limits.max_response_tokens,
            temperature: self.endpoint.temperature,
            sample,
            logprobs,
            top_logprobs: self.endpoint.top_logprobs,
            thinking: self.endpoint.thinking,
        };
        self.call(|b| b.complete(&request))
    }

    /// Generates from a fully rendered prompt and splits off the reasoning.
    pub fn generate(&self, prompt: &str, sample: u64) -> Result<GenerationResult> {
        let completion = self.complete(prompt, sample, true)?;
        let (reasoning, summary) = parse::split_reasoning(
            &completion.text,
            &self.endpoint.reasoning_open,
            &self.endpoint.reasoning_close,
        );
        if summary.trim().is_empty() {
            return Err(Error::Generation(format!(
                "{}: empty summary in completion",
                self.endpoint.model_id
            )));
        }
        let token_logprobs = completion
            .tokens
            .as_ref()
            .map(|ts| ts.iter().map(|t| t.logprob).collect::<Vec<_>>());
        let token_count = match &token_logprobs {
            Some(lps) => lps.len(),
            None => self.counter.count(&completion.text),
        };
        Ok(GenerationResult {
            reasoning,
            summary,
            raw: completion.text,
            token_logprobs,
            token_count,
        })
    }

    /// Renders the preference-generation prompt for `prior` and a history
    /// block, then generates. Returns the prompt actually sent as well.
    pub fn generate_summary(
        &self,
        prior: Option<&PreferenceSummary>,
        history_text: &str,
        empty_marker: &str,
        sample: u64,
    ) -> Result<(String, GenerationResult)> {
        let past = prior.map(|p| p.text.as_str()).unwrap_or(empty_marker);
        let prompt =
            self.render_fitted(history_text, |h| templates::preference_generation(past, h));
        let result = self.generate(&prompt, sample)?;
        Ok((prompt, result))
    }

    fn judge_once(&self, prompt: &str) -> Result<(f64, Option<(f64, f64)>)> {
        let completion = self.complete(prompt, 0, true)?;
        if let Some((lp_a, lp_b)) = completion.tokens.as_deref().and_then(parse::label_logprobs) {
            return Ok((parse::prob_first(lp_a, lp_b), Some((lp_a, lp_b))));
        }
        if completion.tokens.is_some() && parse::parse_selection(&completion.text, false).is_none() {
            return Err(Error::Judge(format!(
                "unparsable selection: {:?}",
                completion.text
            )));
        }
        self.telemetry.incr("judge_sampled");
        let k = self.endpoint.judge_samples;
        let mut first = 0usize;
        let mut parsed = 0usize;
        for sample in 0..k as u64 {
            let c = self.complete(prompt, sample, false)?;
            if let Some(choice) = parse::parse_selection(&c.text, false) {
                parsed += 1;
                if choice == Choice::A {
                    first += 1;
                }
            }
        }
        if parsed == 0 {
            return Err(Error::Judge(format!("no parsable selection in {k} samples")));
        }
        Ok((first as f64 / parsed as f64, None))
    }

    /// Probability that `item_a` is preferred given a summary and context.
    ///
    /// With `debias` the pair is judged in both orders and the two estimates
    /// of the same event are averaged.
    pub fn judge_pair(
        &self,
        summary: &str,
        context: Option<&str>,
        item_a: &str,
        item_b: &str,
        debias: bool,
    ) -> Result<JudgeVerdict> {
        if item_a.is_empty() || item_b.is_empty() {
            return Err(Error::contract("judged items must be non-empty"));
        }
        if item_a == item_b {
            return Err(Error::contract("judged items must be distinct"));
        }
        let ctx = context.unwrap_or(templates::NO_CONTEXT);
        let forward = templates::judge(ctx, summary, item_a, item_b);
        let (p_forward, lp_forward) = self.judge_once(&forward)?;
        if !debias {
            return Ok(JudgeVerdict {
                prob_first: p_forward,
                raw_logprobs: lp_forward.into_iter().collect(),
                order_debiased: false,
                sampled: lp_forward.is_none(),
            });
        }
        let swapped = templates::judge(ctx, summary, item_b, item_a);
        let (p_swapped, lp_swapped) = self.judge_once(&swapped)?;
        Ok(JudgeVerdict {
            prob_first: 0.5 * (p_forward + (1.0 - p_swapped)),
            raw_logprobs: lp_forward.into_iter().chain(lp_swapped).collect(),
            order_debiased: true,
            sampled: lp_forward.is_none() || lp_swapped.is_none(),
        })
    }

    /// One log-probability per response token under the endpoint's model.
    pub fn policy_logprobs(&self, prompt: &str, response: &str) -> Result<Vec<f64>> {
        let total = self.counter.count(prompt) + self.counter.count(response);
        let limit = self.endpoint.limits.max_prompt_tokens + self.endpoint.limits.max_response_tokens;
        if total > limit {
            return Err(Error::contract(format!(
                "prompt+response of {total} tokens exceeds limit {limit}"
            )));
        }
        self.call(|b| b.sequence_logprobs(prompt, response))
    }

    /// Unit-normalized embedding.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::contract("cannot embed empty text"));
        }
        let mut v = self.call(|b| b.embed(text))?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Backend("embedding has zero or non-finite norm".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

fn connect_backend(endpoint: &ModelEndpoint) -> Result<Arc<dyn Backend>> {
    let url = &endpoint.base_url;
    if let Some(rest) = url.strip_prefix("mock:") {
        let (kind, query) = rest.split_once('?').unwrap_or((rest, ""));
        let params = parse_query(query)?;
        return match kind {
            "hash" => Ok(Arc::new(mock::HashMock::from_params(&params)?)),
            "simlab" => Ok(Arc::new(crate::simlab::SimBackend::from_params(&params)?)),
            other => Err(Error::config(format!("unknown mock backend {other:?}"))),
        };
    }
    #[cfg(feature = "http")]
    if url.starts_with("http://") || url.starts_with("https://") {
        return Ok(Arc::new(http::HttpBackend::new(endpoint)?));
    }
    Err(Error::config(format!("unsupported endpoint url {url:?}")))
}

/// Parses `a=1&b=x` mock parameters.
pub fn parse_query(query: &str) -> Result<Vec<(String, String)>> {
    url::form_urlencoded::parse(query.as_bytes())
        .map(|(k, v)| Ok((k.into_owned(), v.into_owned())))
        .collect()
}

pub(crate) fn param<T: std::str::FromStr>(params: &[(String, String)], key: &str) -> Result<Option<T>> {
    params
        .iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| {
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for mock parameter {key}")))
        })
        .transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn whitespace_tokens_reassemble() {
        let t = WhitespaceTokens;
        for text in ["", "a", " a b  c\n", "one two", "   ", "héllo wörld"] {
            assert_eq!(t.split(text).concat(), text);
        }
        assert_eq!(t.split("a b c").len(), 3);
        assert_eq!(t.split("  a b").len(), 2);
    }

    #[test]
    fn endpoint_toml() {
        let e = ModelEndpoint::from_toml_str(
            r#"
            base_url = "mock:hash?seed=3"
            model_id = "m"
            role = "judge"
            api_key_env_var = "KEY"
            [limits]
            retry_limit = 2
            "#,
        )
        .unwrap();
        assert_eq!(e.role, Role::Judge);
        assert_eq!(e.limits.retry_limit, 2);
        assert_eq!(e.limits.max_prompt_tokens, 8192);
        assert_eq!(e.limits.max_response_tokens, 4096);
        assert!(ModelEndpoint::from_toml_str(
            "base_url='x'\nmodel_id='m'\nrole='judge'\n[limits]\nretry_limit=99"
        )
        .is_err());
        assert!(ModelEndpoint::from_toml_str(
            "base_url='x'\nmodel_id='m'\nrole='judge'\n[limits]\nmax_prompt_tokens=0"
        )
        .is_err());
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }

    impl Backend for Flaky {
        fn complete(&self, _r: &CompletionRequest) -> Result<Completion> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(Error::Backend("connection reset".into()))
            } else {
                Ok(Completion {
                    text: "fine".into(),
                    tokens: None,
                })
            }
        }
    }

    fn flaky_client(failures: usize, retry_limit: u32) -> Client {
        let mut e = ModelEndpoint::new("mock:flaky", "m", Role::Generator);
        e.limits.retry_limit = retry_limit;
        e.limits.backoff_ms = 0;
        Client::new(
            e,
            Arc::new(Flaky {
                failures,
                calls: AtomicUsize::new(0),
            }),
        )
        .unwrap()
    }

    #[test]
    fn retries_are_bounded_and_observable() {
        let c = flaky_client(2, 3);
        assert!(c.generate("p", 0).is_ok());
        assert_eq!(c.telemetry().get("attempts"), 3);
        assert_eq!(c.telemetry().get("retries"), 2);

        let c = flaky_client(10, 3);
        assert!(matches!(c.generate("p", 0), Err(Error::Backend(_))));
        assert_eq!(c.telemetry().get("attempts"), 4);
    }

    #[test]
    fn left_truncation_keeps_the_tail() {
        let mut e = ModelEndpoint::new("mock:hash", "m", Role::Generator);
        e.limits.max_prompt_tokens = 3;
        let c = Client::connect(e).unwrap();
        assert_eq!(c.left_truncate("a b c d e"), "c d e");
        assert_eq!(c.telemetry().get("truncations"), 1);
        assert_eq!(c.left_truncate("a b"), "a b");
    }

    #[test]
    fn fitted_render_truncates_history_first() {
        let mut e = ModelEndpoint::new("mock:hash", "m", Role::Generator);
        e.limits.max_prompt_tokens = 6;
        let c = Client::connect(e).unwrap();
        let out = c.render_fitted("h1 h2 h3 h4 h5", |h| format!("HEAD [{h}] TAIL"));
        assert_eq!(out, "HEAD [h2 h3 h4 h5] TAIL");
        assert_eq!(c.telemetry().get("truncations"), 1);
    }

    #[test]
    fn judge_rejects_bad_items() {
        let c = Client::connect(ModelEndpoint::new("mock:hash", "m", Role::Judge)).unwrap();
        assert!(c.judge_pair("s", None, "x", "x", true).is_err());
        assert!(c.judge_pair("s", None, "", "x", true).is_err());
    }

    #[test]
    fn unknown_scheme() {
        assert!(Client::connect(ModelEndpoint::new("ftp://x", "m", Role::Judge)).is_err());
        assert!(Client::connect(ModelEndpoint::new("mock:nope", "m", Role::Judge)).is_err());
    }
}
