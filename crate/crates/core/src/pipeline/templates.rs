use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::llm::{fill_slots, AgentId};

/// Every placeholder a template may use.
pub const SLOTS: [&str; 6] = ["request", "focal_code", "preamble", "instruction", "ui_plan", "widget_state"];

pub fn required_slots(agent_id: AgentId) -> &'static [&'static str] {
    match agent_id {
        AgentId::Advisor => &["request", "focal_code", "preamble"],
        AgentId::UiPlanner => &["request", "instruction", "focal_code", "preamble"],
        AgentId::UiCoder => &["instruction", "ui_plan", "focal_code", "preamble"],
        AgentId::CodeInjector => &["request", "widget_state", "focal_code", "preamble"],
        AgentId::PromptSuggester => &["request", "focal_code", "preamble"],
    }
}

const BUILTIN: [(AgentId, &str); 5] = [
    (AgentId::Advisor, include_str!("../../templates/advisor.txt")),
    (AgentId::UiPlanner, include_str!("../../templates/ui_planner.txt")),
    (AgentId::UiCoder, include_str!("../../templates/ui_coder.txt")),
    (AgentId::CodeInjector, include_str!("../../templates/code_injector.txt")),
    (AgentId::PromptSuggester, include_str!("../../templates/prompt_suggester.txt")),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template for {agent_id}: {message}")]
    Parse { agent_id: AgentId, message: String },
    #[error("template for {agent_id} lacks the {{{slot}}} slot")]
    MissingSlot { agent_id: AgentId, slot: &'static str },
    #[error("template io error at {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub agent_id: AgentId,
    pub version: u32,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    /// Parses the `version:` header followed by `[system]` and `[user]`
    /// sections.
    pub fn parse(agent_id: AgentId, text: &str) -> Result<Self, TemplateError> {
        let err = |message: &str| TemplateError::Parse { agent_id, message: message.to_string() };
        let text = text.replace("\r\n", "\n");
        let (header, rest) = text.split_once('\n').ok_or_else(|| err("empty template"))?;
        let version = header
            .strip_prefix("version:")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| err("first line must be `version: <n>`"))?;
        let rest = rest.strip_prefix("[system]\n").ok_or_else(|| err("missing [system] section"))?;
        let (system, user) = rest.split_once("\n[user]\n").ok_or_else(|| err("missing [user] section"))?;
        let template =
            Self { agent_id, version, system: system.trim_end().to_string(), user: user.trim_end().to_string() };
        for slot in required_slots(agent_id) {
            if !template.user.contains(&format!("{{{slot}}}")) {
                return Err(TemplateError::MissingSlot { agent_id, slot });
            }
        }
        Ok(template)
    }

    /// Fills the known slots in the user section. Braces that do not name a
    /// slot, such as those in code or JSON, are kept.
    pub fn render_user(&self, slots: &BTreeMap<String, String>) -> String {
        let known: BTreeMap<String, String> =
            slots.iter().filter(|(k, _)| SLOTS.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
        fill_slots(&self.user, &known)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    by_agent: BTreeMap<AgentId, PromptTemplate>,
}

impl Templates {
    /// The templates shipped in the `templates/` directory of this crate.
    pub fn builtin() -> Self {
        let by_agent = BUILTIN
            .iter()
            .map(|(agent, text)| (*agent, PromptTemplate::parse(*agent, text).expect("builtin templates are valid")))
            .collect();
        Self { by_agent }
    }

    /// Reads `<agent_id>.txt` for every agent from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut by_agent = BTreeMap::new();
        for agent in AgentId::ALL {
            let path = dir.join(format!("{agent}.txt"));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
            by_agent.insert(agent, PromptTemplate::parse(agent, &text)?);
        }
        Ok(Self { by_agent })
    }

    pub fn get(&self, agent_id: AgentId) -> &PromptTemplate {
        &self.by_agent[&agent_id]
    }
}
