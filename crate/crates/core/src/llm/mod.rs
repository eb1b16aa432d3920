//! Chat-completion gateway shared by all agents.
//!
//! One [`LlmGateway`] fronts one backend: a live HTTP endpoint, a recorded
//! [`TranscriptStore`] replayed by request fingerprint, or a deterministic
//! [`StubBackend`]. Every call lands in the exchange log.

mod fingerprint;
mod live;
pub mod mock;
mod stub;
mod transcript;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fingerprint::{fingerprint, normalize_content};
pub use live::{LiveBackend, LiveConfig, AGENT_HEADER, API_KEY_ENV, BASE_URL_ENV};
pub use stub::{fill_slots, Responder, StubBackend, StubRequest};
pub use transcript::{TranscriptEntry, TranscriptStore, TRANSCRIPT_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentId {
    Advisor,
    UiPlanner,
    UiCoder,
    CodeInjector,
    PromptSuggester,
}

impl AgentId {
    pub const ALL: [AgentId; 5] =
        [AgentId::Advisor, AgentId::UiPlanner, AgentId::UiCoder, AgentId::CodeInjector, AgentId::PromptSuggester];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentId::Advisor => "advisor",
            AgentId::UiPlanner => "ui_planner",
            AgentId::UiCoder => "ui_coder",
            AgentId::CodeInjector => "code_injector",
            AgentId::PromptSuggester => "prompt_suggester",
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentId::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| format!("unknown agent `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub agent_id: AgentId,
    pub model_id: String,
    pub temperature: f64,
    pub system_template: String,
    pub max_output_tokens: u32,
}

impl AgentConfig {
    pub fn default_for(agent_id: AgentId) -> Self {
        let (model_id, max_output_tokens) = match agent_id {
            AgentId::Advisor => ("gpt-4-0125-preview", 512),
            AgentId::UiPlanner => ("gpt-4-0125-preview", 1024),
            AgentId::UiCoder => ("gpt-4-0125-preview", 2048),
            AgentId::CodeInjector => ("gpt-3.5-turbo", 2048),
            AgentId::PromptSuggester => ("gpt-3.5-turbo", 256),
        };
        Self {
            agent_id,
            model_id: model_id.to_string(),
            temperature: 0.2,
            system_template: String::new(),
            max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Replay,
    Stub,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Live => "live",
            BackendKind::Replay => "replay",
            BackendKind::Stub => "stub",
        }
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendKind::Live),
            "replay" => Ok(BackendKind::Replay),
            "stub" => Ok(BackendKind::Stub),
            other => Err(format!("unknown llm mode `{other}` (expected live, replay or stub)")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub agent_id: AgentId,
    pub request_messages: Vec<ChatMessage>,
    pub response: String,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("llm backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no recorded {agent_id} response for fingerprint {fingerprint}")]
    ReplayMiss { agent_id: AgentId, fingerprint: String },
    #[error("no stub response registered for {0}")]
    StubMiss(AgentId),
    #[error("transcript io error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("recording requires the live backend")]
    NotRecording,
}

impl LlmError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        LlmError::Io { path: path.display().to_string(), message: err.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LlmError::BackendUnavailable(_) => "BackendUnavailable",
            LlmError::ReplayMiss { .. } => "ReplayMiss",
            LlmError::StubMiss(_) => "StubMiss",
            LlmError::Io { .. } => "IoError",
            LlmError::NotRecording => "NotRecording",
        }
    }
}

pub enum Backend {
    Live(LiveBackend),
    Replay(TranscriptStore),
    Stub(StubBackend),
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Live(_) => BackendKind::Live,
            Backend::Replay(_) => BackendKind::Replay,
            Backend::Stub(_) => BackendKind::Stub,
        }
    }
}

/// User content for one call together with the slot values it was rendered
/// from. Stub responders can read the slots; other backends ignore them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prompt {
    pub user_content: String,
    pub slots: BTreeMap<String, String>,
}

impl Prompt {
    pub fn new(user_content: impl Into<String>) -> Self {
        Self { user_content: user_content.into(), slots: BTreeMap::new() }
    }
}

pub struct LlmGateway {
    configs: BTreeMap<AgentId, AgentConfig>,
    backend: Backend,
    log: Mutex<Vec<ChatExchange>>,
    recorder: Option<Mutex<TranscriptStore>>,
}

impl fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmGateway").field("backend", &self.backend.kind()).finish_non_exhaustive()
    }
}

impl LlmGateway {
    pub fn new(backend: Backend) -> Self {
        let configs = AgentId::ALL.into_iter().map(|a| (a, AgentConfig::default_for(a))).collect();
        Self { configs, backend, log: Mutex::default(), recorder: None }
    }

    pub fn stub(stub: StubBackend) -> Self {
        Self::new(Backend::Stub(stub))
    }

    pub fn replay(store: TranscriptStore) -> Self {
        Self::new(Backend::Replay(store))
    }

    pub fn live(config: LiveConfig) -> Result<Self, LlmError> {
        Ok(Self::new(Backend::Live(LiveBackend::new(config)?)))
    }

    /// Captures every successful live exchange into a transcript store.
    pub fn with_recording(mut self) -> Self {
        self.recorder = Some(Mutex::default());
        self
    }

    /// Replaces one agent's config; there is always exactly one per agent.
    pub fn set_config(&mut self, config: AgentConfig) {
        self.configs.insert(config.agent_id, config);
    }

    pub fn config(&self, agent_id: AgentId) -> &AgentConfig {
        &self.configs[&agent_id]
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn stub_backend(&self) -> Option<&StubBackend> {
        match &self.backend {
            Backend::Stub(s) => Some(s),
            _ => None,
        }
    }

    /// Messages sent for a call: the agent's system text, each context block
    /// as a user message, then the user content.
    pub fn build_messages(&self, agent_id: AgentId, user_content: &str, context_blocks: &[String]) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(context_blocks.len() + 2);
        messages.push(ChatMessage::new(Role::System, self.configs[&agent_id].system_template.clone()));
        messages.extend(context_blocks.iter().map(|b| ChatMessage::new(Role::User, b.clone())));
        messages.push(ChatMessage::new(Role::User, user_content));
        messages
    }

    pub async fn complete(
        &self,
        agent_id: AgentId,
        user_content: &str,
        context_blocks: &[String],
    ) -> Result<String, LlmError> {
        self.complete_prompt(agent_id, &Prompt::new(user_content), context_blocks).await
    }

    pub async fn complete_prompt(
        &self,
        agent_id: AgentId,
        prompt: &Prompt,
        context_blocks: &[String],
    ) -> Result<String, LlmError> {
        let messages = self.build_messages(agent_id, &prompt.user_content, context_blocks);
        let started = Instant::now();
        let response = match &self.backend {
            Backend::Live(live) => live.complete(&self.configs[&agent_id], &messages).await?,
            Backend::Replay(store) => {
                let fp = fingerprint(&messages);
                store
                    .lookup(agent_id, &fp)
                    .map(|e| e.response.clone())
                    .ok_or(LlmError::ReplayMiss { agent_id, fingerprint: fp })?
            }
            Backend::Stub(stub) => stub
                .respond(&StubRequest {
                    agent_id,
                    messages: &messages,
                    user_content: &prompt.user_content,
                    slots: &prompt.slots,
                })
                .ok_or(LlmError::StubMiss(agent_id))?,
        };
        if let (Some(recorder), Backend::Live(_)) = (&self.recorder, &self.backend) {
            recorder.lock().unwrap().insert(agent_id, messages.clone(), response.clone());
        }
        tracing::debug!(agent = %agent_id, backend = %self.backend.kind(), "completion");
        self.log.lock().unwrap().push(ChatExchange {
            agent_id,
            request_messages: messages,
            response: response.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            backend: self.backend.kind(),
        });
        Ok(response)
    }

    /// Snapshot of the exchange log in call order.
    pub fn exchanges(&self) -> Vec<ChatExchange> {
        self.log.lock().unwrap().clone()
    }

    pub fn recorded(&self) -> Result<TranscriptStore, LlmError> {
        match &self.recorder {
            Some(r) => Ok(r.lock().unwrap().clone()),
            None => Err(LlmError::NotRecording),
        }
    }

    pub fn export_transcripts(&self, path: impl AsRef<Path>) -> Result<(), LlmError> {
        self.recorded()?.export(path)
    }
}
