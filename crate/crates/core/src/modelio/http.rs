//! Chat-completion-compatible HTTP backend.
//!
//! * generation and judging: `POST {base}/chat/completions` with
//!   `logprobs`/`top_logprobs` requested;
//! * sequence scoring: `POST {base}/completions` with `echo` so the server
//!   returns prompt-token logprobs;
//! * embeddings: `POST {base}/embeddings`.

use std::time::Duration;

use reqwest::blocking::{Client as HttpClient, Response};
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, Completion, CompletionRequest, ModelEndpoint, TokenInfo};
use crate::error::{Error, Result};

pub struct HttpBackend {
    http: HttpClient,
    base_url: String,
    model_id: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint: &ModelEndpoint) -> Result<Self> {
        let api_key = match &endpoint.api_key_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = HttpClient::builder()
            .timeout(Duration::from_secs(endpoint.limits.timeout_secs))
            .build()
            .map_err(|e| Error::config(format!("http client: {e}")))?;
        Ok(Self {
            http,
            base_url: endpoint.base_url.trim_end_matches('/').to_string(),
            model_id: endpoint.model_id.clone(),
            api_key,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let mut req = self.http.post(format!("{}{path}", self.base_url)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Backend(format!("{path}: {e}")))?;
        Self::decode(path, resp)
    }

    fn decode(path: &str, resp: Response) -> Result<Value> {
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Error::Backend(format!("{path}: reading body: {e}")))?;
        if status.is_success() {
            return serde_json::from_str(&text).map_err(|source| Error::Json {
                context: format!("{path} response"),
                source,
            });
        }
        let msg = format!("{path}: http {status}: {}", truncate(&text, 300));
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            Err(Error::Backend(msg))
        } else if status == StatusCode::NOT_FOUND || status == StatusCode::NOT_IMPLEMENTED {
            Err(Error::Capability(msg))
        } else {
            Err(Error::Generation(msg))
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    reasoning_content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<ChatToken>>,
}

#[derive(Deserialize)]
struct ChatToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopToken>,
}

#[derive(Deserialize)]
struct TopToken {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct TextResponse {
    choices: Vec<TextChoice>,
}

#[derive(Deserialize)]
struct TextChoice {
    logprobs: Option<TextLogprobs>,
}

#[derive(Deserialize)]
struct TextLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let mut body = json!({
            "model": self.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "seed": request.sample,
        });
        if request.logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(request.top_logprobs);
        }
        if let Some(thinking) = request.thinking {
            body["chat_template_kwargs"] = json!({ "enable_thinking": thinking });
        }
        let value = self.post("/chat/completions", &body)?;
        let resp: ChatResponse = serde_json::from_value(value).map_err(|source| Error::Json {
            context: "chat completion".into(),
            source,
        })?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Generation("no choices in completion".into()))?;
        let content = choice.message.content.unwrap_or_default();
        // servers that split reasoning out of the content get it re-wrapped
        let text = match choice.message.reasoning_content {
            Some(r) if !r.is_empty() => format!("<think>\n{r}\n</think>\n{content}"),
            _ => content,
        };
        if text.trim().is_empty() {
            return Err(Error::Generation("empty completion".into()));
        }
        let tokens = choice.logprobs.and_then(|l| l.content).map(|ts| {
            ts.into_iter()
                .map(|t| TokenInfo {
                    token: t.token,
                    logprob: t.logprob,
                    top: t.top_logprobs.into_iter().map(|x| (x.token, x.logprob)).collect(),
                })
                .collect()
        });
        Ok(Completion { text, tokens })
    }

    fn sequence_logprobs(&self, prompt: &str, response: &str) -> Result<Vec<f64>> {
        let full = format!("{prompt}{response}");
        let body = json!({
            "model": self.model_id,
            "prompt": full,
            "max_tokens": 1,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let value = self.post("/completions", &body)?;
        let resp: TextResponse = serde_json::from_value(value).map_err(|source| Error::Json {
            context: "completion logprobs".into(),
            source,
        })?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| Error::Capability("server returned no echo logprobs".into()))?;
        let prompt_chars = prompt.chars().count();
        let full_chars = full.chars().count();
        let mut out = Vec::new();
        for ((_, lp), offset) in lp.tokens.iter().zip(&lp.token_logprobs).zip(&lp.text_offset) {
            if *offset >= prompt_chars && *offset < full_chars {
                out.push(lp.ok_or_else(|| Error::Capability("missing token logprob".into()))?);
            }
        }
        if out.is_empty() {
            return Err(Error::Capability("no response tokens were scored".into()));
        }
        Ok(out)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let body = json!({ "model": self.model_id, "input": text });
        let value = self.post("/embeddings", &body)?;
        let resp: EmbeddingResponse = serde_json::from_value(value).map_err(|source| Error::Json {
            context: "embedding".into(),
            source,
        })?;
        resp.data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::Backend("no embedding in response".into()))
    }
}
