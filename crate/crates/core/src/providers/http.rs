//! OpenAI-compatible HTTP clients.
//!
//! `POST {base_url}/chat/completions` and `POST {base_url}/embeddings` with
//! JSON bodies. The bearer token is read from an environment variable at
//! call time and never stored in configuration files.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_embed_input, check_embed_output, ChatProvider, ChatRequest, EmbedProvider,
    EmbeddingVector, ProviderError, TokenUsage,
};

pub const DEFAULT_API_KEY_ENV: &str = "RAZEWRIGHT_API_KEY";
const ERROR_BODY_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// e.g. `http://localhost:8000/v1`; a trailing slash is ignored.
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout: Duration,
}

impl ProviderConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        ProviderConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout: Duration::from_secs(120),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.base_url.trim_end_matches('/'))
    }

    fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
    }
}

fn truncate(body: &str) -> String {
    match body.char_indices().nth(ERROR_BODY_LIMIT) {
        Some((i, _)) => format!("{}…", &body[..i]),
        None => body.to_string(),
    }
}

struct Endpoint {
    cfg: ProviderConfig,
    agent: ureq::Agent,
}

impl Endpoint {
    fn new(cfg: ProviderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        Endpoint { cfg, agent }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let mut req = self
            .agent
            .post(&self.cfg.url(path))
            .header("Content-Type", "application/json");
        if let Some(key) = self.cfg.api_key() {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status == 429 {
            return Err(ProviderError::RateLimited { retry_after });
        }
        if !(200..300).contains(&status) {
            return Err(ProviderError::Protocol {
                status: Some(status),
                body: truncate(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Protocol {
            status: Some(status),
            body: truncate(&format!("{e}: {text}")),
        })
    }
}

fn malformed(what: &str, body: &Value) -> ProviderError {
    ProviderError::Protocol {
        status: Some(200),
        body: truncate(&format!("{what}: {body}")),
    }
}

/// Chat client for `/chat/completions`.
pub struct HttpChat {
    endpoint: Endpoint,
    usage: Mutex<TokenUsage>,
}

impl HttpChat {
    pub fn new(cfg: ProviderConfig) -> Self {
        HttpChat {
            endpoint: Endpoint::new(cfg),
            usage: Mutex::new(TokenUsage::default()),
        }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.endpoint.cfg
    }
}

/// Request body; an empty request model falls back to the endpoint's model.
pub fn chat_body(cfg: &ProviderConfig, req: &ChatRequest) -> Value {
    let model = if req.model.is_empty() {
        &cfg.model
    } else {
        &req.model
    };
    let mut body = json!({
        "model": model,
        "messages": req.messages,
        "temperature": req.temperature,
    });
    if let Some(n) = req.max_tokens {
        body["max_tokens"] = json!(n);
    }
    body
}

/// Extracts the first choice's content and the usage block, if any.
pub fn parse_chat_response(body: &Value) -> Result<(String, Option<TokenUsage>), ProviderError> {
    let content = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing choices[0].message.content", body))?;
    let usage = body.get("usage").map(|u| TokenUsage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u
            .get("completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    });
    Ok((content.to_string(), usage))
}

impl ChatProvider for HttpChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let resp = self
            .endpoint
            .post("chat/completions", &chat_body(&self.endpoint.cfg, req))?;
        let (content, usage) = parse_chat_response(&resp)?;
        if let Some(u) = usage {
            let mut total = self.usage.lock().expect("usage lock");
            total.prompt_tokens += u.prompt_tokens;
            total.completion_tokens += u.completion_tokens;
        }
        Ok(content)
    }

    fn usage(&self) -> TokenUsage {
        *self.usage.lock().expect("usage lock")
    }
}

/// Embedding client for `/embeddings`.
pub struct HttpEmbedder {
    endpoint: Endpoint,
}

impl HttpEmbedder {
    pub fn new(cfg: ProviderConfig) -> Self {
        HttpEmbedder {
            endpoint: Endpoint::new(cfg),
        }
    }
}

/// Vectors from an embeddings response, ordered by their `index` field.
pub fn parse_embedding_response(body: &Value) -> Result<Vec<EmbeddingVector>, ProviderError> {
    let data = body
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing data array", body))?;
    let mut indexed = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item
            .get("index")
            .and_then(Value::as_u64)
            .map_or(pos, |i| i as usize);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing embedding", body))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed("non-numeric embedding value", body)))
            .collect::<Result<Vec<_>, _>>()?;
        indexed.push((index, EmbeddingVector::new(values)?));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, v)| v).collect())
}

impl EmbedProvider for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        check_embed_input(texts)?;
        let body = json!({ "model": self.endpoint.cfg.model, "input": texts });
        let resp = self.endpoint.post("embeddings", &body)?;
        let vectors = parse_embedding_response(&resp)?;
        check_embed_output(texts.len(), &vectors)?;
        Ok(vectors)
    }

    fn model_name(&self) -> &str {
        &self.endpoint.cfg.model
    }
}
