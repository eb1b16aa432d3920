#![allow(dead_code)]

pub mod widgetgen;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use eui_engine::config::EngineConfig;
use eui_engine::kernel::{KernelConfig, KernelSession};
use eui_engine::llm::{LlmGateway, StubBackend};
use eui_engine::session::{Engine, OpenOptions, Session};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn notebook_fixture() -> PathBuf {
    fixtures().join("ml_tutorial.ipynb")
}

pub fn scenario(name: &str) -> PathBuf {
    fixtures().join("scenarios").join(format!("{name}.json"))
}

pub fn responses(name: &str) -> PathBuf {
    fixtures().join("responses").join(name)
}

pub fn transcripts(name: &str) -> PathBuf {
    fixtures().join("transcripts").join(format!("{name}.json"))
}

pub const REPLAY_SCENARIOS: [&str; 3] = ["image_sampling", "model_construction", "training_visualization"];

pub fn kernel_config() -> KernelConfig {
    KernelConfig { timeout: Duration::from_secs(10), working_dir: fixtures(), ..KernelConfig::default() }
}

pub async fn kernel(id: &str) -> KernelSession {
    KernelSession::start(id, &kernel_config()).await.expect("kernel starts")
}

pub fn engine_config() -> EngineConfig {
    let mut c = EngineConfig::default();
    c.kernel.timeout_s = 10.0;
    c
}

pub fn stub_engine(stub: StubBackend) -> Arc<Engine> {
    Arc::new(Engine::with_gateway(engine_config(), LlmGateway::stub(stub)).expect("engine builds"))
}

/// Engine answering from the authored responses of one scenario.
pub fn responses_engine(name: &str) -> Arc<Engine> {
    stub_engine(StubBackend::from_dir(responses(name)).expect("responses load"))
}

/// Opens the tutorial notebook, saving edits into `dir`.
pub async fn open_tutorial(engine: &Engine, dir: &Path) -> Arc<Session> {
    let options = OpenOptions::new(notebook_fixture()).save_to(dir.join("tutorial.ipynb"));
    engine.open_session(options).await.expect("session opens")
}

/// Runs `nbformat.validate` on a saved notebook; returns the error text on failure.
pub fn nbformat_validate(path: &Path) -> Result<(), String> {
    let out = std::process::Command::new("python3")
        .args(["-c", "import sys, nbformat; nbformat.validate(nbformat.read(sys.argv[1], as_version=4))"])
        .arg(path)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}
