//! Text generation and sentence embedding behind one trait.
//!
//! [`OpenAiBackend`] talks to any OpenAI-compatible chat-completions and
//! embeddings endpoint. [`ScriptedBackend`] replays canned completions from a
//! script file and is the oracle for every offline test. [`Recorder`] wraps
//! either and keeps an audit log of each exchange.

mod embed;
mod openai;
mod scripted;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use embed::{cosine, HashEmbedder, HASH_EMBEDDING_DIM};
pub use openai::{OpenAiBackend, OpenAiConfig, RetryPolicy};
pub use scripted::{load_script, save_script, Matcher, ScriptEntry, ScriptedBackend};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Default sampling temperature for both agents.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
/// Default nucleus-sampling mass.
pub const DEFAULT_TOP_P: f64 = 1.0;

/// Sampling parameters shared by every call of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
        }
    }
}

/// A backend-neutral chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Logging label; the scripted backend also sequences calls by it.
    pub tag: String,
}

impl GenerationRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            n_samples: 1,
            max_tokens: None,
            tag: tag.into(),
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.n_samples = n;
        self
    }

    pub fn with_sampling(mut self, temperature: f64, top_p: f64) -> Self {
        self.temperature = temperature;
        self.top_p = top_p;
        self
    }

    pub fn sampled(self, sampling: Sampling) -> Self {
        self.with_sampling(sampling.temperature, sampling.top_p)
    }

    /// Content of the last user turn, or the empty string.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Backend(format!(
                "request `{}` has no messages",
                self.tag
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Backend(format!(
                "request `{}` asks for 0 samples",
                self.tag
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Backend(format!(
                "negative temperature in `{}`",
                self.tag
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Backend(format!(
                "top_p outside (0, 1] in `{}`",
                self.tag
            )));
        }
        if let Some(m) = self
            .messages
            .iter()
            .find(|m| m.role != Role::System && m.content.trim().is_empty())
        {
            return Err(Error::Backend(format!(
                "empty {:?} message in `{}`",
                m.role, self.tag
            )));
        }
        Ok(())
    }
}

/// A source of completions and embeddings. Implementations are shared by
/// concurrently running episodes.
pub trait Backend: Send + Sync {
    /// Returns exactly `request.n_samples` non-empty completions.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>>;

    /// One vector per input text, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;

    fn name(&self) -> &str;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        (**self).generate(request)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        (**self).generate(request)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Checks the completion-count and non-empty contract shared by backends.
pub(crate) fn check_completions(tag: &str, n: usize, completions: &[String]) -> Result<()> {
    if completions.len() != n {
        return Err(Error::Backend(format!(
            "`{tag}`: expected {n} completions, got {}",
            completions.len()
        )));
    }
    if completions.iter().any(|c| c.trim().is_empty()) {
        return Err(Error::EmptyCompletion {
            tag: tag.to_string(),
        });
    }
    Ok(())
}

/// One audited exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub tag: String,
    pub request: Vec<ChatMessage>,
    pub completions: Vec<String>,
}

/// Wraps a backend and records every successful generate call.
pub struct Recorder<B> {
    inner: B,
    log: Mutex<Vec<Exchange>>,
}

impl<B: Backend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().unwrap().clone()
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        let completions = self.inner.generate(request)?;
        tracing::debug!(tag = %request.tag, n = completions.len(), "completion");
        self.log.lock().unwrap().push(Exchange {
            tag: request.tag.clone(),
            request: request.messages.clone(),
            completions: completions.clone(),
        });
        Ok(completions)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.inner.embed(texts)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}
