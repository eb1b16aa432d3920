use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fingerprint, AgentId, ChatMessage, LlmError};

pub const TRANSCRIPT_FORMAT: &str = "eui-transcripts/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub agent_id: AgentId,
    pub fingerprint: String,
    pub messages: Vec<ChatMessage>,
    pub response: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TranscriptFile {
    format: String,
    entries: Vec<TranscriptEntry>,
}

/// Recorded responses keyed by agent and request fingerprint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptStore {
    entries: BTreeMap<(AgentId, String), TranscriptEntry>,
}

impl TranscriptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, agent_id: AgentId, messages: Vec<ChatMessage>, response: String) -> String {
        let fp = fingerprint(&messages);
        self.entries
            .insert((agent_id, fp.clone()), TranscriptEntry { agent_id, fingerprint: fp.clone(), messages, response });
        fp
    }

    pub fn lookup(&self, agent_id: AgentId, fingerprint: &str) -> Option<&TranscriptEntry> {
        self.entries.get(&(agent_id, fingerprint.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.values()
    }

    pub fn from_json_str(text: &str) -> Result<Self, String> {
        let file: TranscriptFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format != TRANSCRIPT_FORMAT {
            return Err(format!("unsupported transcript format `{}`", file.format));
        }
        let mut store = Self::new();
        for entry in file.entries {
            let recomputed = fingerprint(&entry.messages);
            if recomputed != entry.fingerprint {
                return Err(format!(
                    "entry {} for {} has fingerprint {recomputed} after recomputation",
                    entry.fingerprint, entry.agent_id
                ));
            }
            store.entries.insert((entry.agent_id, entry.fingerprint.clone()), entry);
        }
        Ok(store)
    }

    /// Canonical text form: entries ordered by (agent, fingerprint), object
    /// keys sorted, two-space indent, trailing newline.
    pub fn to_json_string(&self) -> String {
        let file =
            TranscriptFile { format: TRANSCRIPT_FORMAT.to_string(), entries: self.entries.values().cloned().collect() };
        let value = serde_json::to_value(&file).expect("transcripts serialize");
        let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
        text.push('\n');
        text
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::io(path, e))?;
        Self::from_json_str(&text).map_err(|message| LlmError::Io { path: path.display().to_string(), message })
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<(), LlmError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| LlmError::io(path, e))
    }

    pub fn merge(&mut self, other: TranscriptStore) {
        self.entries.extend(other.entries);
    }
}
