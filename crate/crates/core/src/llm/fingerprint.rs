use sha2::{Digest, Sha256};

use super::ChatMessage;

/// Collapses every whitespace run (including line endings) to one space and
/// trims both ends.
pub fn normalize_content(content: &str) -> String {
    content.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stable content hash of a request. Only roles and normalized contents
/// participate; model ids, temperatures and token limits do not.
pub fn fingerprint(messages: &[ChatMessage]) -> String {
    let pairs: Vec<(&str, String)> =
        messages.iter().map(|m| (m.role.as_str(), normalize_content(&m.content))).collect();
    let canonical = serde_json::to_vec(&pairs).expect("pairs serialize");
    hex::encode(Sha256::digest(&canonical))
}
