use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use ureq::Agent;

use super::{check_completions, Backend, ChatMessage, GenerationRequest};
use crate::{Error, Result};

/// Bounded exponential backoff. Only transport failures, HTTP 429 and 5xx
/// are retried.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub retries: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base, 2·base, 4·base, ...
    pub fn delay(&self, retry: usize) -> Duration {
        self.base_delay * (1u32 << retry.min(16))
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    pub embedding_model: Option<String>,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl OpenAiConfig {
    pub const ENV_BASE_URL: &'static str = "CONSULT_API_BASE";
    pub const ENV_MODEL: &'static str = "CONSULT_MODEL";
    pub const ENV_EMBEDDING_MODEL: &'static str = "CONSULT_EMBEDDING_MODEL";
    pub const ENV_API_KEY: &'static str = "CONSULT_API_KEY";

    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            embedding_model: None,
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads endpoint, model, embedding model and key from the environment.
    /// `OPENAI_API_KEY` is used when the dedicated key variable is unset.
    pub fn from_env() -> Result<Self> {
        let base = std::env::var(Self::ENV_BASE_URL)
            .unwrap_or_else(|_| "https://api.openai.com/v1".to_string());
        let model = std::env::var(Self::ENV_MODEL)
            .map_err(|_| Error::Config(format!("{} is not set", Self::ENV_MODEL)))?;
        let mut cfg = Self::new(base, model);
        cfg.embedding_model = std::env::var(Self::ENV_EMBEDDING_MODEL).ok();
        cfg.api_key = std::env::var(Self::ENV_API_KEY)
            .or_else(|_| std::env::var("OPENAI_API_KEY"))
            .ok();
        Ok(cfg)
    }
}

/// Client for OpenAI-compatible `/chat/completions` and `/embeddings`.
pub struct OpenAiBackend {
    config: OpenAiConfig,
    agent: Agent,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T> {
        let url = format!("{}/{}", self.config.base_url, path);
        let policy = &self.config.retry;
        let mut last = String::new();
        for attempt in 0..=policy.retries {
            if attempt > 0 {
                let delay = policy.delay(attempt - 1);
                tracing::warn!(%url, attempt, ?delay, error = %last, "retrying");
                std::thread::sleep(delay);
            }
            match self.try_post(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::BackendUnavailable {
            attempts: policy.retries + 1,
            message: last,
        })
    }

    fn try_post<T: serde::de::DeserializeOwned>(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> std::result::Result<T, Attempt> {
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(Error::Backend(format!(
                "HTTP {status}: {text}"
            ))));
        }
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| Attempt::Fatal(Error::Backend(format!("bad response body: {e}"))))
    }

    fn chat(&self, request: &GenerationRequest, n: usize) -> Result<Vec<String>> {
        let body = ChatBody {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.temperature,
            top_p: request.top_p,
            n,
            max_tokens: request.max_tokens,
        };
        let body = serde_json::to_value(&body)?;
        let resp: ChatResponse = self.post_json("chat/completions", &body)?;
        Ok(resp
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }
}

impl Backend for OpenAiBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        request.validate()?;
        tracing::debug!(tag = %request.tag, n = request.n_samples, "chat request");
        let mut out = self.chat(request, request.n_samples)?;
        out.truncate(request.n_samples);
        // Some servers ignore `n`; top up one sample at a time.
        while out.len() < request.n_samples {
            let more = self.chat(request, 1)?;
            if more.is_empty() {
                return Err(Error::Backend(format!(
                    "`{}`: no choices returned",
                    request.tag
                )));
            }
            out.extend(more.into_iter().take(request.n_samples - out.len()));
        }
        check_completions(&request.tag, request.n_samples, &out)?;
        Ok(out)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let model = self
            .config
            .embedding_model
            .as_deref()
            .ok_or_else(|| Error::Config("no embedding model configured".into()))?;
        let body = json!({ "model": model, "input": texts });
        let mut resp: EmbeddingResponse = self.post_json("embeddings", &body)?;
        if resp.data.len() != texts.len() {
            return Err(Error::Backend(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data.sort_by_key(|d| d.index);
        let vectors: Vec<Vec<f64>> = resp.data.into_iter().map(|d| d.embedding).collect();
        if vectors.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(Error::Backend("embeddings of mixed dimension".into()));
        }
        Ok(vectors)
    }

    fn name(&self) -> &str {
        &self.config.model
    }
}
