//! Records transcripts for a scenario through a local OpenAI-compatible
//! server that answers from a directory of canned responses.

use std::path::PathBuf;

use eui_engine::scenario::{record_with_responses, LoadedScript, RunOptions};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let name = std::env::args().nth(1).unwrap_or_else(|| "model_construction".into());
    let loaded = LoadedScript::load(fixtures.join("scenarios").join(format!("{name}.json")))?;
    let report = record_with_responses(&loaded, &fixtures.join("responses").join(&name), RunOptions::default()).await?;
    let store = report.transcripts.unwrap_or_default();
    for entry in store.entries() {
        println!("{:<16} {}", entry.agent_id.as_str(), &entry.fingerprint[..16]);
    }
    let out = std::env::temp_dir().join(format!("{name}.transcripts.json"));
    store.export(&out)?;
    eprintln!("{}: {} exchanges written to {}", report.outcome, store.len(), out.display());
    Ok(())
}
