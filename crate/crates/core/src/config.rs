//! `engine.toml` settings.
//!
//! ```toml
//! [llm]
//! mode = "replay"
//! transcripts = "fixtures/transcripts/image_sampling.json"
//! context_budget = 24000
//! regenerate_once = false
//!
//! [llm.models]
//! advisor = "gpt-4-0125-preview"
//!
//! [kernel]
//! timeout_s = 30
//!
//! [session]
//! idle_timeout_s = 1800
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::kernel::KernelConfig;
use crate::llm::{AgentConfig, AgentId, BackendKind};
use crate::pipeline::{PipelineOptions, DEFAULT_CONTEXT_BUDGET};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub mode: BackendKind,
    pub transcripts: Option<PathBuf>,
    pub context_budget: usize,
    pub regenerate_once: bool,
    pub models: BTreeMap<AgentId, String>,
    pub temperatures: BTreeMap<AgentId, f64>,
    pub max_output_tokens: BTreeMap<AgentId, u32>,
    pub max_retries: u32,
    pub request_timeout_s: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            mode: BackendKind::Replay,
            transcripts: None,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            regenerate_once: false,
            models: BTreeMap::new(),
            temperatures: BTreeMap::new(),
            max_output_tokens: BTreeMap::new(),
            max_retries: 2,
            request_timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub python: String,
    pub timeout_s: f64,
    pub memory_mb: Option<u64>,
    pub env_allowlist: Vec<String>,
}

impl Default for KernelSection {
    fn default() -> Self {
        let k = KernelConfig::default();
        Self {
            python: k.python,
            timeout_s: k.timeout.as_secs_f64(),
            memory_mb: k.memory_mb,
            env_allowlist: k.env_allowlist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub idle_timeout_s: u64,
    pub templates_dir: Option<PathBuf>,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self { idle_timeout_s: 30 * 60, templates_dir: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub llm: LlmSection,
    pub kernel: KernelSection,
    pub session: SessionSection,
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(t) = &config.llm.transcripts {
            config.llm.transcripts = Some(base.join(t));
        }
        if let Some(t) = &config.session.templates_dir {
            config.session.templates_dir = Some(base.join(t));
        }
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.kernel.timeout_s.is_finite() && self.kernel.timeout_s > 0.0) {
            return Err(ConfigError::Parse("kernel.timeout_s must be positive".into()));
        }
        if let Some((agent, t)) = self.llm.temperatures.iter().find(|(_, t)| !(0.0..=2.0).contains(*t)) {
            return Err(ConfigError::Parse(format!("temperature {t} for {agent} is outside [0, 2]")));
        }
        if self.llm.max_output_tokens.values().any(|n| *n == 0) {
            return Err(ConfigError::Parse("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn kernel_config(&self, working_dir: impl Into<PathBuf>) -> KernelConfig {
        KernelConfig {
            python: self.kernel.python.clone(),
            working_dir: working_dir.into(),
            timeout: Duration::from_secs_f64(self.kernel.timeout_s),
            memory_mb: self.kernel.memory_mb,
            env_allowlist: self.kernel.env_allowlist.clone(),
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions { context_budget: self.llm.context_budget, regenerate_once: self.llm.regenerate_once }
    }

    pub fn idle_timeout(&self) -> Duration {
        Duration::from_secs(self.session.idle_timeout_s)
    }

    /// Agent config with this file's overrides applied.
    pub fn agent_config(&self, agent_id: AgentId) -> AgentConfig {
        let mut c = AgentConfig::default_for(agent_id);
        if let Some(m) = self.llm.models.get(&agent_id) {
            c.model_id = m.clone();
        }
        if let Some(t) = self.llm.temperatures.get(&agent_id) {
            c.temperature = *t;
        }
        if let Some(n) = self.llm.max_output_tokens.get(&agent_id) {
            c.max_output_tokens = *n;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = EngineConfig::from_toml_str("").unwrap();
        assert_eq!(c.llm.mode, BackendKind::Replay);
        assert_eq!(c.llm.context_budget, 24_000);
        assert!(!c.llm.regenerate_once);
        assert_eq!(c.idle_timeout(), Duration::from_secs(1800));
        assert_eq!(c.kernel_config(".").timeout, Duration::from_secs(30));
        assert_eq!(c.agent_config(AgentId::UiCoder).model_id, "gpt-4-0125-preview");
        assert_eq!(c.agent_config(AgentId::CodeInjector).model_id, "gpt-3.5-turbo");
    }

    #[test]
    fn overrides() {
        let c = EngineConfig::from_toml_str(
            r#"
            [llm]
            mode = "stub"
            regenerate_once = true
            [llm.models]
            code_injector = "local-model"
            [llm.temperatures]
            advisor = 0.0
            [kernel]
            timeout_s = 2.5
            "#,
        )
        .unwrap();
        assert_eq!(c.llm.mode, BackendKind::Stub);
        assert!(c.pipeline_options().regenerate_once);
        assert_eq!(c.agent_config(AgentId::CodeInjector).model_id, "local-model");
        assert_eq!(c.agent_config(AgentId::Advisor).temperature, 0.0);
        assert_eq!(c.kernel_config(".").timeout, Duration::from_millis(2500));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(EngineConfig::from_toml_str("[llm]\nmode = \"cloud\"").is_err());
        assert!(EngineConfig::from_toml_str("[llm.temperatures]\nadvisor = 3.0").is_err());
        assert!(EngineConfig::from_toml_str("[kernel]\ntimeout_s = 0").is_err());
        assert!(EngineConfig::from_toml_str("[typo]\nx = 1").is_err());
    }
}
