//! Serves the HTTP API in stub mode, opens a session on the tutorial
//! notebook and drives one panel through the REST endpoints.

use std::sync::Arc;

use eui_engine::config::EngineConfig;
use eui_engine::llm::{LlmGateway, StubBackend};
use eui_engine::session::{http, Engine};
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let stub = StubBackend::from_dir(fixtures.join("responses/image_sampling"))?;
    let engine = Arc::new(Engine::with_gateway(EngineConfig::default(), LlmGateway::stub(stub))?);
    let (addr, _server) = http::spawn(engine.clone(), ([127, 0, 0, 1], 0).into()).await?;
    let base = format!("http://{addr}");
    let client = reqwest::Client::new();

    let save = std::env::temp_dir().join("serve_http_example.ipynb");
    let open: Value = client
        .post(format!("{base}/sessions"))
        .json(&json!({"notebook_path": fixtures.join("ml_tutorial.ipynb"), "save_path": save}))
        .send()
        .await?
        .json()
        .await?;
    let s = format!("{base}/sessions/{}", open["session_id"].as_str().unwrap_or_default());

    client.post(format!("{s}/cells/load-data/run")).send().await?;
    let render: Value = client.post(format!("{s}/cells/ask-sample/ephemeral-ui")).send().await?.json().await?;
    for w in render["manifest"]["widgets"].as_array().into_iter().flatten() {
        println!("{} {} = {}", w["widget_kind"], w["label"], w["current_value"]);
    }
    let panel = render["panel_id"].as_str().unwrap_or_default();
    let injected: Value = client.post(format!("{s}/panels/{panel}/submit")).send().await?.json().await?;
    println!("\n{}", injected["code"].as_str().unwrap_or_default());
    println!("\nevents: ws://{addr}/sessions/{}/events", open["session_id"].as_str().unwrap_or_default());
    engine.shutdown().await;
    Ok(())
}
