use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::kernel::{ExecError, SyncValue};
use crate::notebook::CellId;
use crate::widgets::{PanelId, WidgetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Suggest,
    EphemeralUi,
    Submit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRender {
    pub panel_id: PanelId,
    pub prompt_cell_id: CellId,
    pub request: String,
    pub instruction: String,
    pub html: String,
    pub manifest: WidgetManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelErrorPayload {
    pub trigger: Trigger,
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell_id: Option<CellId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panel_id: Option<PanelId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInjected {
    pub anchor_cell_id: CellId,
    pub new_cell_id: CellId,
    pub code: String,
    pub prompt_cell_id: CellId,
    pub panel_id: PanelId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionOutput {
    pub cell_id: CellId,
    pub text: String,
}

/// Result of running a cell. Wall-clock duration is left out so traces stay
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutput {
    pub cell_id: CellId,
    pub execution_count: u32,
    pub ok: bool,
    pub stdout: String,
    pub stderr: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_repr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ExecError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotebookChanged {
    pub version: u64,
    pub cell_id: CellId,
    pub reason: String,
}

/// Answer to one inbound widget event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidgetAck {
    pub panel_id: PanelId,
    pub element_id: u32,
    pub sequence_no: u64,
    pub ok: bool,
    /// The widget's value after the event was handled.
    pub value: Option<SyncValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    PanelRender(PanelRender),
    PanelError(PanelErrorPayload),
    CellInjected(CellInjected),
    SuggestionOutput(SuggestionOutput),
    ExecOutput(ExecOutput),
    NotebookChanged(NotebookChanged),
    WidgetAck(WidgetAck),
}

impl EventPayload {
    pub const KINDS: [&'static str; 7] = [
        "panel_render",
        "panel_error",
        "cell_injected",
        "suggestion_output",
        "exec_output",
        "notebook_changed",
        "widget_ack",
    ];

    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::PanelRender(_) => "panel_render",
            EventPayload::PanelError(_) => "panel_error",
            EventPayload::CellInjected(_) => "cell_injected",
            EventPayload::SuggestionOutput(_) => "suggestion_output",
            EventPayload::ExecOutput(_) => "exec_output",
            EventPayload::NotebookChanged(_) => "notebook_changed",
            EventPayload::WidgetAck(_) => "widget_ack",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerEvent {
    pub session_id: String,
    pub server_seq: u64,
    #[serde(flatten)]
    pub event: EventPayload,
    /// Milliseconds since the session opened. Not part of the wire format.
    #[serde(skip)]
    pub elapsed_ms: u64,
}

impl ServerEvent {
    pub fn kind(&self) -> &'static str {
        self.event.kind()
    }
}

struct BusState {
    log: Vec<ServerEvent>,
    next_seq: u64,
}

/// Per-session ordered event log with live fan-out.
pub(crate) struct EventBus {
    session_id: String,
    opened: Instant,
    state: Mutex<BusState>,
    tx: broadcast::Sender<ServerEvent>,
}

impl EventBus {
    pub(crate) fn new(session_id: String) -> Self {
        let (tx, _) = broadcast::channel(1024);
        Self { session_id, opened: Instant::now(), state: Mutex::new(BusState { log: Vec::new(), next_seq: 1 }), tx }
    }

    pub(crate) fn emit(&self, event: EventPayload) -> ServerEvent {
        let mut state = self.state.lock().unwrap();
        let ev = ServerEvent {
            session_id: self.session_id.clone(),
            server_seq: state.next_seq,
            event,
            elapsed_ms: self.opened.elapsed().as_millis() as u64,
        };
        state.next_seq += 1;
        state.log.push(ev.clone());
        let _ = self.tx.send(ev.clone());
        ev
    }

    pub(crate) fn log(&self) -> Vec<ServerEvent> {
        self.state.lock().unwrap().log.clone()
    }

    pub(crate) fn log_since(&self, seq: u64) -> Vec<ServerEvent> {
        self.state.lock().unwrap().log.iter().filter(|e| e.server_seq > seq).cloned().collect()
    }

    /// Backlog after `since` plus a receiver for everything emitted later,
    /// taken atomically so nothing is missed or duplicated.
    pub(crate) fn subscribe_from(&self, since: u64) -> (Vec<ServerEvent>, broadcast::Receiver<ServerEvent>) {
        let state = self.state.lock().unwrap();
        let backlog = state.log.iter().filter(|e| e.server_seq > since).cloned().collect();
        (backlog, self.tx.subscribe())
    }
}
