//! Notebook sessions: one notebook, one kernel, one panel, one event stream.
//!
//! [`Engine`] owns the sessions and the shared [`Pipeline`]. Every state
//! change a client may care about is published as a [`ServerEvent`] with a
//! per-session `server_seq`.

mod events;
pub mod http;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::sync::{broadcast, RwLock};
use tokio_util::sync::CancellationToken;

use crate::config::EngineConfig;
use crate::kernel::{ExecResult, KernelError, KernelSession};
use crate::llm::{BackendKind, LiveConfig, LlmError, LlmGateway, StubBackend, TranscriptStore};
use crate::notebook::{self, CellId, CellKind, CodeContext, NotebookDoc, NotebookError, Output};
use crate::pipeline::{Pipeline, PipelineError, TemplateError, Templates};
use crate::widgets::{self, PanelId, PanelRegistry, WidgetError, WidgetEvent};

use events::EventBus;
pub use events::{
    CellInjected, ErrorInfo, EventPayload, ExecOutput, NotebookChanged, PanelErrorPayload, PanelRender, ServerEvent,
    SuggestionOutput, Trigger, WidgetAck,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error(transparent)]
    Notebook(#[from] NotebookError),
    #[error("cell `{0}` is not executable")]
    NotExecutable(CellId),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Widget(#[from] WidgetError),
    #[error("superseded by a newer trigger")]
    Cancelled,
    #[error("engine setup failed: {0}")]
    Setup(String),
}

impl SessionError {
    pub fn kind(&self) -> &'static str {
        match self {
            SessionError::UnknownSession(_) => "UnknownSession",
            SessionError::Notebook(e) => match e {
                NotebookError::UnknownCell(_) => "UnknownCell",
                NotebookError::NotAPromptCell(_) => "NotAPromptCell",
                NotebookError::MalformedNotebook { .. } => "MalformedNotebook",
                NotebookError::PromptMarkerInInjectedCell => "PromptMarkerInInjectedCell",
                NotebookError::Io { .. } => "IoError",
            },
            SessionError::NotExecutable(_) => "NotExecutable",
            SessionError::Kernel(KernelError::KernelDead) => "KernelDead",
            SessionError::Kernel(KernelError::Timeout { .. }) => "Timeout",
            SessionError::Kernel(_) => "KernelError",
            SessionError::Pipeline(e) => e.kind(),
            SessionError::Widget(e) => e.kind(),
            SessionError::Cancelled => "Cancelled",
            SessionError::Setup(_) => "SetupError",
        }
    }

    pub fn info(&self) -> ErrorInfo {
        ErrorInfo { kind: self.kind().to_string(), message: self.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone)]
pub struct OpenOptions {
    pub notebook_path: PathBuf,
    /// Where edits are saved; defaults to `notebook_path`.
    pub save_path: Option<PathBuf>,
    /// Kernel working directory; defaults to the notebook's directory.
    pub working_dir: Option<PathBuf>,
}

impl OpenOptions {
    pub fn new(notebook_path: impl Into<PathBuf>) -> Self {
        Self { notebook_path: notebook_path.into(), save_path: None, working_dir: None }
    }

    pub fn save_to(mut self, path: impl Into<PathBuf>) -> Self {
        self.save_path = Some(path.into());
        self
    }
}

#[derive(Debug, Clone)]
struct PanelOrigin {
    panel_id: PanelId,
    prompt_cell_id: CellId,
    request: String,
    context: CodeContext,
}

#[derive(Default)]
struct PanelState {
    registry: PanelRegistry,
    origin: Option<PanelOrigin>,
}

pub struct Session {
    id: String,
    save_path: PathBuf,
    kernel: KernelSession,
    pipeline: Arc<Pipeline>,
    doc: Mutex<NotebookDoc>,
    panels: tokio::sync::Mutex<PanelState>,
    bus: EventBus,
    run_lock: tokio::sync::Mutex<()>,
    pending: Mutex<Option<(u64, CancellationToken)>>,
    trigger_gen: AtomicU64,
    last_activity: Mutex<Instant>,
    exec_count: AtomicU32,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("id", &self.id).field("save_path", &self.save_path).finish_non_exhaustive()
    }
}

fn exec_outputs(result: &ExecResult, execution_count: u32) -> Vec<Output> {
    let mut outputs = Vec::new();
    if !result.stdout.is_empty() {
        outputs.push(Output::stdout(result.stdout.clone()));
    }
    if !result.stderr.is_empty() {
        outputs.push(Output::stderr(result.stderr.clone()));
    }
    if let Some(repr) = &result.value_repr {
        outputs.push(Output::text_result(Some(execution_count), repr.clone()));
    }
    if let Some(err) = &result.error {
        outputs.push(Output::Error {
            ename: err.ename.clone(),
            evalue: err.message.clone(),
            traceback: err.traceback.lines().map(String::from).collect(),
        });
    }
    outputs
}

impl Session {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kernel(&self) -> &KernelSession {
        &self.kernel
    }

    pub fn save_path(&self) -> &Path {
        &self.save_path
    }

    pub fn notebook(&self) -> NotebookDoc {
        self.doc.lock().unwrap().clone()
    }

    /// All events emitted so far, in `server_seq` order.
    pub fn events(&self) -> Vec<ServerEvent> {
        self.bus.log()
    }

    pub fn events_since(&self, seq: u64) -> Vec<ServerEvent> {
        self.bus.log_since(seq)
    }

    pub fn subscribe_from(&self, since: u64) -> (Vec<ServerEvent>, broadcast::Receiver<ServerEvent>) {
        self.bus.subscribe_from(since)
    }

    pub fn active_panel(&self) -> Option<PanelId> {
        self.panels.try_lock().ok().and_then(|p| p.registry.active().map(|a| a.id().clone()))
    }

    pub fn idle_for(&self) -> Duration {
        self.last_activity.lock().unwrap().elapsed()
    }

    fn touch(&self) {
        *self.last_activity.lock().unwrap() = Instant::now();
    }

    fn save(&self, doc: &NotebookDoc) -> Result<()> {
        notebook::write_notebook(&self.save_path, doc)?;
        Ok(())
    }

    fn changed(&self, doc: &NotebookDoc, cell_id: &CellId, reason: &str) {
        self.bus.emit(EventPayload::NotebookChanged(NotebookChanged {
            version: doc.version(),
            cell_id: cell_id.clone(),
            reason: reason.to_string(),
        }));
    }

    fn panel_error(&self, trigger: Trigger, err: &SessionError, cell_id: Option<CellId>, panel_id: Option<PanelId>) {
        tracing::info!(session = %self.id, ?trigger, kind = err.kind(), "trigger failed: {err}");
        self.bus.emit(EventPayload::PanelError(PanelErrorPayload {
            trigger,
            kind: err.kind().to_string(),
            message: err.to_string(),
            cell_id,
            panel_id,
        }));
    }

    /// Runs an authored code cell and stores its outputs.
    pub async fn run_cell(&self, cell_id: &CellId) -> Result<ExecResult> {
        self.touch();
        let source = {
            let doc = self.doc.lock().unwrap();
            let cell = doc.cell(cell_id)?;
            if cell.kind() != CellKind::Code {
                return Err(SessionError::NotExecutable(cell_id.clone()));
            }
            cell.source().to_string()
        };
        let count = self.exec_count.fetch_add(1, Ordering::SeqCst) + 1;
        let outcome = self.kernel.execute(&source, None).await;
        let (outputs, event) = match &outcome {
            Ok(r) => (
                exec_outputs(r, count),
                ExecOutput {
                    cell_id: cell_id.clone(),
                    execution_count: count,
                    ok: r.ok,
                    stdout: r.stdout.clone(),
                    stderr: r.stderr.clone(),
                    value_repr: r.value_repr.clone(),
                    error: r.error.clone(),
                },
            ),
            Err(e) => {
                let error = crate::kernel::ExecError {
                    ename: SessionError::Kernel(e.clone()).kind().to_string(),
                    message: e.to_string(),
                    traceback: String::new(),
                };
                let output =
                    Output::Error { ename: error.ename.clone(), evalue: error.message.clone(), traceback: vec![] };
                (
                    vec![output],
                    ExecOutput {
                        cell_id: cell_id.clone(),
                        execution_count: count,
                        ok: false,
                        stdout: String::new(),
                        stderr: String::new(),
                        value_repr: None,
                        error: Some(error),
                    },
                )
            }
        };
        {
            let mut doc = self.doc.lock().unwrap();
            doc.set_outputs(cell_id, outputs, Some(count))?;
            self.save(&doc)?;
            self.bus.emit(EventPayload::ExecOutput(event));
            self.changed(&doc, cell_id, "run_cell");
        }
        Ok(outcome?)
    }

    /// Light-bulb button: prints a suggested request below the prompt cell.
    pub async fn trigger_suggest(&self, cell_id: &CellId) -> Result<String> {
        self.touch();
        let result = self.suggest_inner(cell_id).await;
        if let Err(e) = &result {
            self.panel_error(Trigger::Suggest, e, Some(cell_id.clone()), None);
        }
        result
    }

    async fn suggest_inner(&self, cell_id: &CellId) -> Result<String> {
        let (request, context) = {
            let doc = self.doc.lock().unwrap();
            let cell = doc.prompt_cell(cell_id)?;
            (notebook::extract_request(cell)?, doc.build_code_context(cell_id)?)
        };
        let existing = (!request.is_empty()).then_some(request.as_str());
        let text = self.pipeline.suggest_prompt(existing, &context).await?;
        let mut doc = self.doc.lock().unwrap();
        doc.append_output(cell_id, Output::stdout(format!("{text}\n")))?;
        self.save(&doc)?;
        self.bus
            .emit(EventPayload::SuggestionOutput(SuggestionOutput { cell_id: cell_id.clone(), text: text.clone() }));
        self.changed(&doc, cell_id, "suggestion");
        Ok(text)
    }

    /// Magic-wand button: plans, builds and renders a new panel for the
    /// prompt cell. A newer trigger cancels this one while it is pending.
    pub async fn trigger_ephemeral_ui(&self, cell_id: &CellId) -> Result<PanelRender> {
        self.touch();
        let token = CancellationToken::new();
        let generation = self.trigger_gen.fetch_add(1, Ordering::SeqCst);
        if let Some((_, previous)) = self.pending.lock().unwrap().replace((generation, token.clone())) {
            previous.cancel();
        }
        let result = tokio::select! {
            r = self.ephemeral_ui_inner(cell_id, &token) => r,
            _ = token.cancelled() => Err(SessionError::Cancelled),
        };
        {
            let mut pending = self.pending.lock().unwrap();
            if pending.as_ref().is_some_and(|(g, _)| *g == generation) {
                *pending = None;
            }
        }
        if let Err(e) = &result {
            self.panel_error(Trigger::EphemeralUi, e, Some(cell_id.clone()), None);
        }
        result
    }

    async fn ephemeral_ui_inner(&self, cell_id: &CellId, token: &CancellationToken) -> Result<PanelRender> {
        let _run = self.run_lock.lock().await;
        if token.is_cancelled() {
            return Err(SessionError::Cancelled);
        }
        let (request, context) = {
            let doc = self.doc.lock().unwrap();
            let cell = doc.prompt_cell(cell_id)?;
            (notebook::extract_request(cell)?, doc.build_code_context(cell_id)?)
        };
        if request.is_empty() {
            return Err(PipelineError::EmptyRequest.into());
        }
        let mut handle = self.pipeline.run_ephemeral_ui(&request, &context, &self.kernel).await?;

        let mut panels = self.panels.lock().await;
        let live = handle.liveness();
        let panel_id = panels.registry.replace_panel(&mut handle.payload, live);
        panels.origin = Some(PanelOrigin {
            panel_id: panel_id.clone(),
            prompt_cell_id: cell_id.clone(),
            request: request.clone(),
            context,
        });
        let render = PanelRender {
            panel_id,
            prompt_cell_id: cell_id.clone(),
            request,
            instruction: handle.instruction.text.clone(),
            html: handle.payload.html.clone(),
            manifest: handle.payload.manifest.clone(),
        };
        self.bus.emit(EventPayload::PanelRender(render.clone()));
        Ok(render)
    }

    /// Inbound widget event. The outcome is also published as a `widget_ack`.
    pub async fn receive_widget_event(&self, event: &WidgetEvent) -> Result<widgets::EventAck> {
        self.touch();
        let mut panels = self.panels.lock().await;
        let outcome = match panels.registry.panel_mut(&event.panel_id) {
            Ok(panel) => widgets::apply_event(&mut *panel, event, &self.kernel).await.map_err(|e| (e, Some(panel))),
            Err(e) => Err((e, None)),
        };
        let ack = match &outcome {
            Ok(ack) => WidgetAck {
                panel_id: ack.panel_id.clone(),
                element_id: ack.element_id,
                sequence_no: ack.sequence_no,
                ok: true,
                value: Some(ack.value.clone()),
                error: None,
            },
            Err((e, panel)) => WidgetAck {
                panel_id: event.panel_id.clone(),
                element_id: event.element_id,
                sequence_no: event.sequence_no,
                ok: false,
                value: panel
                    .as_ref()
                    .and_then(|p| p.manifest().widget(event.element_id))
                    .map(|w| w.current_value.clone()),
                error: Some(ErrorInfo { kind: e.kind().to_string(), message: e.to_string() }),
            },
        };
        self.bus.emit(EventPayload::WidgetAck(ack));
        let result = outcome.map_err(|(e, _)| SessionError::from(e));
        drop(panels);
        result
    }

    /// Submit button: turns the current widget values into a new code cell
    /// below the panel's prompt cell.
    pub async fn submit_panel(&self, panel_id: &PanelId) -> Result<CellInjected> {
        self.touch();
        let result = self.submit_inner(panel_id).await;
        if let Err(e) = &result {
            self.panel_error(Trigger::Submit, e, None, Some(panel_id.clone()));
        }
        result
    }

    async fn submit_inner(&self, panel_id: &PanelId) -> Result<CellInjected> {
        let _run = self.run_lock.lock().await;
        let (manifest, origin) = {
            let panels = self.panels.lock().await;
            let panel = panels.registry.panel(panel_id)?;
            let origin = panels.origin.clone().filter(|o| &o.panel_id == panel_id);
            (panel.manifest().clone(), origin.ok_or_else(|| WidgetError::StalePanel(panel_id.clone()))?)
        };
        let state = widgets::snapshot_state(&manifest, &self.kernel).await?;
        let code =
            self.pipeline.inject_code_with_policy(&state, &origin.request, &origin.context, &self.kernel).await?;
        let mut doc = self.doc.lock().unwrap();
        let (anchor, new_cell_id) = doc.inject_below_prompt(&origin.prompt_cell_id, code.clone())?;
        self.save(&doc)?;
        let injected = CellInjected {
            anchor_cell_id: anchor,
            new_cell_id: new_cell_id.clone(),
            code,
            prompt_cell_id: origin.prompt_cell_id.clone(),
            panel_id: panel_id.clone(),
        };
        self.bus.emit(EventPayload::CellInjected(injected.clone()));
        self.changed(&doc, &new_cell_id, "cell_injected");
        Ok(injected)
    }

    pub async fn shutdown(&self) {
        if let Some((_, t)) = self.pending.lock().unwrap().take() {
            t.cancel();
        }
        self.kernel.shutdown().await;
    }
}

/// Builds the gateway for `config.llm.mode`. Stub mode needs `stub`.
pub fn build_gateway(config: &EngineConfig, stub: Option<StubBackend>) -> Result<LlmGateway> {
    let setup = |e: LlmError| SessionError::Setup(e.to_string());
    let mut gateway = match config.llm.mode {
        BackendKind::Live => {
            let mut live = LiveConfig::from_env().map_err(setup)?;
            live.max_retries = config.llm.max_retries;
            live.request_timeout = Duration::from_secs(config.llm.request_timeout_s);
            LlmGateway::live(live).map_err(setup)?
        }
        BackendKind::Replay => {
            let path = config
                .llm
                .transcripts
                .as_ref()
                .ok_or_else(|| SessionError::Setup("replay mode needs a transcripts file".into()))?;
            LlmGateway::replay(TranscriptStore::import(path).map_err(setup)?)
        }
        BackendKind::Stub => LlmGateway::stub(
            stub.ok_or_else(|| SessionError::Setup("stub mode needs registered stub responses".into()))?,
        ),
    };
    for agent in crate::llm::AgentId::ALL {
        gateway.set_config(config.agent_config(agent));
    }
    Ok(gateway)
}

#[derive(Debug)]
pub struct Engine {
    config: EngineConfig,
    pipeline: Arc<Pipeline>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    next_id: AtomicU64,
}

impl Engine {
    pub fn new(config: EngineConfig, pipeline: Pipeline) -> Self {
        Self { config, pipeline: Arc::new(pipeline), sessions: RwLock::default(), next_id: AtomicU64::new(1) }
    }

    /// Engine with templates and options taken from `config`.
    pub fn with_gateway(config: EngineConfig, gateway: LlmGateway) -> Result<Self> {
        let templates = match &config.session.templates_dir {
            Some(dir) => Templates::load_dir(dir).map_err(|e: TemplateError| SessionError::Setup(e.to_string()))?,
            None => Templates::builtin(),
        };
        let options = config.pipeline_options();
        Ok(Self::new(config, Pipeline::new(gateway, templates, options)))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub async fn open_session(&self, options: OpenOptions) -> Result<Arc<Session>> {
        let doc = notebook::read_notebook(&options.notebook_path)?;
        let working_dir = match options.working_dir {
            Some(dir) => dir,
            None => options
                .notebook_path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        let id = format!("session-{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let kernel = KernelSession::start(id.clone(), &self.config.kernel_config(working_dir)).await?;
        let session = Arc::new(Session {
            id: id.clone(),
            save_path: options.save_path.unwrap_or(options.notebook_path),
            kernel,
            pipeline: self.pipeline.clone(),
            doc: Mutex::new(doc),
            panels: tokio::sync::Mutex::default(),
            bus: EventBus::new(id.clone()),
            run_lock: tokio::sync::Mutex::new(()),
            pending: Mutex::new(None),
            trigger_gen: AtomicU64::new(0),
            last_activity: Mutex::new(Instant::now()),
            exec_count: AtomicU32::new(0),
        });
        {
            let doc = session.doc.lock().unwrap();
            session.save(&doc)?;
        }
        self.sessions.write().await.insert(id.clone(), session.clone());
        tracing::info!(session = %id, "session opened");
        Ok(session)
    }

    pub async fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub async fn session_ids(&self) -> Vec<String> {
        self.sessions.read().await.keys().cloned().collect()
    }

    pub async fn close_session(&self, id: &str) -> Result<()> {
        let session =
            self.sessions.write().await.remove(id).ok_or_else(|| SessionError::UnknownSession(id.to_string()))?;
        session.shutdown().await;
        Ok(())
    }

    /// Closes sessions idle for longer than the configured timeout.
    pub async fn reap_idle(&self) -> Vec<String> {
        let limit = self.config.idle_timeout();
        let expired: Vec<Arc<Session>> = {
            let mut sessions = self.sessions.write().await;
            let ids: Vec<String> =
                sessions.iter().filter(|(_, s)| s.idle_for() > limit).map(|(k, _)| k.clone()).collect();
            ids.iter().filter_map(|id| sessions.remove(id)).collect()
        };
        for s in &expired {
            tracing::info!(session = %s.id, "closing idle session");
            s.shutdown().await;
        }
        expired.iter().map(|s| s.id.clone()).collect()
    }

    pub async fn shutdown(&self) {
        let sessions: Vec<Arc<Session>> = std::mem::take(&mut *self.sessions.write().await).into_values().collect();
        for s in sessions {
            s.shutdown().await;
        }
    }
}

/// Periodically closes idle sessions until the token is cancelled.
pub fn spawn_reaper(engine: Arc<Engine>, period: Duration, stop: CancellationToken) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tokio::select! {
                _ = stop.cancelled() => break,
                _ = tick.tick() => { engine.reap_idle().await; }
            }
        }
    })
}
