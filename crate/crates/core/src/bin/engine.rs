use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use eui_engine::config::EngineConfig;
use eui_engine::llm::mock::MockChatServer;
use eui_engine::llm::{BackendKind, LiveConfig, LlmGateway, StubBackend};
use eui_engine::scenario::{self, LoadedScript, RunOptions};
use eui_engine::session::{build_gateway, http, spawn_reaper, Engine, OpenOptions};
use tokio_util::sync::CancellationToken;

#[derive(Parser)]
#[command(name = "engine", version, about = "Ephemeral-UI code generation engine for notebooks")]
struct Cli {
    /// engine.toml to load.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script. Exit 0 when every assertion passes, 1 on the
    /// first failed assertion, 2 on an engine error.
    RunScenario {
        script: PathBuf,
        #[arg(long)]
        llm_mode: Option<BackendKind>,
        /// Write the JSON-lines event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Drop the timing field from the written trace.
        #[arg(long)]
        mask_timing: bool,
        /// Keep the edited notebook here.
        #[arg(long)]
        out_notebook: Option<PathBuf>,
    },
    /// Record model exchanges for later replay. With --script the script runs
    /// headless; otherwise a server runs until Ctrl-C.
    Record {
        notebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
        /// Answer from `<agent_id>.txt` responses in this directory through a
        /// local chat server instead of ENGINE_LLM_BASE_URL.
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
    /// Serve the HTTP API and the event socket.
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        llm_mode: Option<BackendKind>,
        /// Stub mode: answer from `<agent_id>.txt` templates in this directory.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
}

fn fail(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig, String> {
    match path {
        Some(p) => EngineConfig::load(p).map_err(|e| e.to_string()),
        None => Ok(EngineConfig::default()),
    }
}

fn stub_from(dir: Option<&Path>) -> Result<Option<StubBackend>, String> {
    dir.map(|d| StubBackend::from_dir(d).map_err(|e| format!("cannot read {}: {e}", d.display()))).transpose()
}

async fn shutdown_signal(stop: CancellationToken) {
    let _ = tokio::signal::ctrl_c().await;
    stop.cancel();
}

async fn serve_engine(engine: Arc<Engine>, addr: SocketAddr) -> Result<(), String> {
    let stop = CancellationToken::new();
    let reaper = spawn_reaper(engine.clone(), Duration::from_secs(60), stop.clone());
    tokio::spawn(shutdown_signal(stop.clone()));
    eprintln!("serving on http://{addr}");
    let waiter = stop.clone();
    let served = http::serve(engine.clone(), addr, async move { waiter.cancelled().await }).await;
    stop.cancel();
    let _ = reaper.await;
    engine.shutdown().await;
    served.map_err(|e| e.to_string())
}

async fn run_scenario(
    config: Option<EngineConfig>,
    script: &Path,
    llm_mode: Option<BackendKind>,
    trace: Option<&Path>,
    mask_timing: bool,
    out_notebook: Option<PathBuf>,
) -> ExitCode {
    let options = RunOptions { llm_mode, out_notebook, gateway: None, config };
    let report = scenario::run_scenario(script, options).await;
    if let Some(path) = trace {
        let text = if mask_timing { report.masked_trace() } else { report.trace_jsonl() };
        if let Err(e) = std::fs::write(path, text) {
            return fail(format!("cannot write {}: {e}", path.display()));
        }
    }
    let verdict = if report.outcome.passed() { "PASS" } else { "FAIL" };
    let name = if report.name.is_empty() { script.display().to_string() } else { report.name.clone() };
    eprintln!(
        "{verdict} {name}: {} ({} steps, {} events, {:.2}s)",
        report.outcome,
        report.steps_run,
        report.trace.len(),
        report.elapsed.as_secs_f64()
    );
    ExitCode::from(report.exit_code() as u8)
}

async fn record(
    config: EngineConfig,
    notebook: &Path,
    out: &Path,
    script: Option<&Path>,
    responses: Option<&Path>,
    port: u16,
) -> ExitCode {
    let mut _server = None;
    let live = match responses {
        Some(dir) => {
            let stub = match stub_from(Some(dir)) {
                Ok(s) => s.expect("directory given"),
                Err(e) => return fail(e),
            };
            let server = match MockChatServer::start(stub).await {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let live = LiveConfig::new(server.base_url());
            _server = Some(server);
            live
        }
        None => match LiveConfig::from_env() {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
    };
    let gateway = match LlmGateway::live(live) {
        Ok(g) => g.with_recording(),
        Err(e) => return fail(e),
    };

    let store = if let Some(script) = script {
        let mut loaded = match LoadedScript::load(script) {
            Ok(l) => l,
            Err(e) => return fail(e),
        };
        loaded.script.notebook_path = std::path::absolute(notebook).unwrap_or_else(|_| notebook.to_path_buf());
        let options = RunOptions { gateway: Some(gateway), config: Some(config), ..Default::default() };
        let report = scenario::run_loaded(&loaded, options).await;
        eprintln!("{}", report.outcome);
        if report.exit_code() == 2 {
            return ExitCode::from(2);
        }
        report.transcripts.unwrap_or_default()
    } else {
        let engine = match Engine::with_gateway(config, gateway) {
            Ok(e) => Arc::new(e),
            Err(e) => return fail(e),
        };
        match engine.open_session(OpenOptions::new(notebook)).await {
            Ok(s) => eprintln!("opened {} as {}", notebook.display(), s.id()),
            Err(e) => return fail(e),
        }
        if let Err(e) = serve_engine(engine.clone(), SocketAddr::from(([127, 0, 0, 1], port))).await {
            return fail(e);
        }
        match engine.pipeline().gateway().recorded() {
            Ok(s) => s,
            Err(e) => return fail(e),
        }
    };
    if let Err(e) = store.export(out) {
        return fail(e);
    }
    eprintln!("wrote {} exchanges to {}", store.len(), out.display());
    ExitCode::SUCCESS
}

async fn serve(
    mut config: EngineConfig,
    host: IpAddr,
    port: u16,
    llm_mode: Option<BackendKind>,
    responses: Option<&Path>,
) -> ExitCode {
    if let Some(mode) = llm_mode {
        config.llm.mode = mode;
    }
    let stub = match stub_from(responses) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let engine = match build_gateway(&config, stub).and_then(|g| Engine::with_gateway(config, g)) {
        Ok(e) => Arc::new(e),
        Err(e) => return fail(e),
    };
    match serve_engine(engine, SocketAddr::new(host, port)).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match cli.command {
        Command::RunScenario { script, llm_mode, trace, mask_timing, out_notebook } => {
            let config = cli.config.is_some().then_some(config);
            run_scenario(config, &script, llm_mode, trace.as_deref(), mask_timing, out_notebook).await
        }
        Command::Record { notebook, out, script, responses, port } => {
            record(config, &notebook, &out, script.as_deref(), responses.as_deref(), port).await
        }
        Command::Serve { port, host, llm_mode, responses } => {
            serve(config, host, port, llm_mode, responses.as_deref()).await
        }
    }
}
