use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{AgentConfig, AgentId, ChatMessage, LlmError};

pub const BASE_URL_ENV: &str = "ENGINE_LLM_BASE_URL";
pub const API_KEY_ENV: &str = "ENGINE_LLM_API_KEY";
/// Request header naming the calling agent.
pub const AGENT_HEADER: &str = "x-engine-agent";

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
    /// Concurrent in-flight requests allowed per agent.
    pub per_agent_concurrency: usize,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            max_retries: 2,
            initial_backoff: Duration::from_millis(250),
            request_timeout: Duration::from_secs(120),
            per_agent_concurrency: 2,
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env() -> Result<Self, LlmError> {
        let base_url = std::env::var(BASE_URL_ENV)
            .map_err(|_| LlmError::BackendUnavailable(format!("{BASE_URL_ENV} is not set")))?;
        let mut config = Self::new(base_url);
        config.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(config)
    }
}

/// Chat-completion client for an OpenAI-compatible HTTP endpoint.
#[derive(Debug)]
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::Client,
    limits: HashMap<AgentId, Arc<Semaphore>>,
}

enum Attempt {
    Retry(String),
    Fail(String),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, LlmError> {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        let limits =
            AgentId::ALL.iter().map(|a| (*a, Arc::new(Semaphore::new(config.per_agent_concurrency.max(1))))).collect();
        Ok(Self { config, client, limits })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub async fn complete(&self, agent: &AgentConfig, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let _permit = self.limits[&agent.agent_id].acquire().await.expect("semaphore is never closed");
        let body = json!({
            "model": agent.model_id,
            "temperature": agent.temperature,
            "max_tokens": agent.max_output_tokens,
            "messages": messages,
        });
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(agent.agent_id, &body).await {
                Ok(text) => return Ok(text),
                Err(Attempt::Retry(msg)) if attempt < self.config.max_retries => {
                    tracing::warn!(agent = %agent.agent_id, attempt, "transient llm failure: {msg}");
                    tokio::time::sleep(backoff).await;
                    backoff *= 2;
                    attempt += 1;
                }
                Err(Attempt::Retry(msg)) | Err(Attempt::Fail(msg)) => {
                    return Err(LlmError::BackendUnavailable(format!(
                        "{} after {} attempt(s): {msg}",
                        self.endpoint(),
                        attempt + 1
                    )))
                }
            }
        }
    }

    async fn attempt(&self, agent_id: AgentId, body: &Value) -> Result<String, Attempt> {
        let mut request = self.client.post(self.endpoint()).header(AGENT_HEADER, agent_id.as_str()).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(Attempt::Fail(format!("status {status}: {text}")));
        }
        let value: Value = response.json().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        match &value["choices"][0]["message"]["content"] {
            Value::String(s) => Ok(s.clone()),
            Value::Null if value["choices"][0]["message"].is_object() => Ok(String::new()),
            _ => Err(Attempt::Fail(format!("unexpected response shape: {value}"))),
        }
    }
}
