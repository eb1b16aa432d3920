//! HTTP and WebSocket front of the [`Engine`]. Wire formats are described
//! in `docs/protocol.md`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use super::{Engine, OpenOptions, Session, SessionError};
use crate::notebook::{CellId, CellKind, NotebookError, Origin};
use crate::pipeline::PipelineError;
use crate::widgets::{PanelId, WidgetError, WidgetEvent};

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        Self(e)
    }
}

fn status_for(e: &SessionError) -> StatusCode {
    match e {
        SessionError::UnknownSession(_) | SessionError::Notebook(NotebookError::UnknownCell(_)) => {
            StatusCode::NOT_FOUND
        }
        SessionError::Notebook(NotebookError::MalformedNotebook { .. } | NotebookError::Io { .. }) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        SessionError::Notebook(_) | SessionError::NotExecutable(_) => StatusCode::BAD_REQUEST,
        SessionError::Pipeline(PipelineError::EmptyRequest) => StatusCode::BAD_REQUEST,
        SessionError::Widget(WidgetError::StalePanel(_)) | SessionError::Cancelled => StatusCode::CONFLICT,
        SessionError::Widget(_) => StatusCode::BAD_REQUEST,
        SessionError::Pipeline(PipelineError::Backend(_)) => StatusCode::BAD_GATEWAY,
        SessionError::Pipeline(PipelineError::Kernel(_)) | SessionError::Kernel(_) | SessionError::Setup(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        SessionError::Pipeline(_) => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.0.info()});
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct OpenRequest {
    pub notebook_path: PathBuf,
    #[serde(default)]
    pub save_path: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenResponse {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CellView {
    pub id: CellId,
    pub kind: CellKind,
    pub source: String,
    pub origin: Origin,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_cell_id: Option<CellId>,
    pub outputs: Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NotebookView {
    pub session_id: String,
    pub version: u64,
    pub active_panel: Option<PanelId>,
    pub cells: Vec<CellView>,
}

async fn session(engine: &Engine, id: &str) -> Result<Arc<Session>, ApiError> {
    Ok(engine.session(id).await?)
}

async fn open(State(engine): State<Arc<Engine>>, Json(req): Json<OpenRequest>) -> ApiResult<OpenResponse> {
    let mut options = OpenOptions::new(req.notebook_path);
    options.save_path = req.save_path;
    let s = engine.open_session(options).await?;
    Ok(Json(OpenResponse { session_id: s.id().to_string() }))
}

async fn notebook(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<NotebookView> {
    let s = session(&engine, &id).await?;
    let doc = s.notebook();
    let cells = doc
        .cells()
        .iter()
        .map(|c| CellView {
            id: c.id().clone(),
            kind: c.kind(),
            source: c.source().to_string(),
            origin: c.origin(),
            prompt_cell_id: c.injected_for().cloned(),
            outputs: serde_json::to_value(c.outputs()).unwrap_or(Value::Null),
        })
        .collect();
    Ok(Json(NotebookView { session_id: id, version: doc.version(), active_panel: s.active_panel(), cells }))
}

async fn run(State(engine): State<Arc<Engine>>, Path((id, cell)): Path<(String, String)>) -> ApiResult<Value> {
    let s = session(&engine, &id).await?;
    let r = s.run_cell(&CellId::new(cell)).await?;
    Ok(Json(serde_json::to_value(r).expect("exec result serializes")))
}

async fn suggest(State(engine): State<Arc<Engine>>, Path((id, cell)): Path<(String, String)>) -> ApiResult<Value> {
    let s = session(&engine, &id).await?;
    let text = s.trigger_suggest(&CellId::new(cell)).await?;
    Ok(Json(json!({"text": text})))
}

async fn ephemeral_ui(State(engine): State<Arc<Engine>>, Path((id, cell)): Path<(String, String)>) -> ApiResult<Value> {
    let s = session(&engine, &id).await?;
    let render = s.trigger_ephemeral_ui(&CellId::new(cell)).await?;
    Ok(Json(serde_json::to_value(render).expect("render serializes")))
}

async fn submit(State(engine): State<Arc<Engine>>, Path((id, panel)): Path<(String, String)>) -> ApiResult<Value> {
    let s = session(&engine, &id).await?;
    let injected = s.submit_panel(&PanelId::new(panel)).await?;
    Ok(Json(serde_json::to_value(injected).expect("injection serializes")))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
}

async fn events(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let s = session(&engine, &id).await?;
    Ok(ws.on_upgrade(move |socket| channel(socket, s, q.since)))
}

fn protocol_error(message: impl Into<String>) -> Message {
    Message::Text(json!({"kind": "protocol_error", "payload": {"message": message.into()}}).to_string().into())
}

async fn channel(mut socket: WebSocket, session: Arc<Session>, since: u64) {
    let (backlog, mut rx) = session.subscribe_from(since);
    let mut last = since;
    for ev in backlog {
        last = ev.server_seq;
        let text = serde_json::to_string(&ev).expect("events serialize");
        if socket.send(Message::Text(text.into())).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) if ev.server_seq <= last => {}
                Ok(ev) => {
                    last = ev.server_seq;
                    let text = serde_json::to_string(&ev).expect("events serialize");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => {
                    let _ = socket.send(protocol_error(format!("event stream lagged; reconnect with ?since={last}"))).await;
                    return;
                }
                Err(RecvError::Closed) => return,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<WidgetEvent>(&text) {
                    Ok(event) => {
                        // the outcome reaches this socket as a widget_ack
                        let _ = session.receive_widget_event(&event).await;
                    }
                    Err(e) => {
                        if socket.send(protocol_error(format!("expected a widget event: {e}"))).await.is_err() {
                            return;
                        }
                    }
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/sessions", post(open))
        .route("/sessions/{id}/notebook", get(notebook))
        .route("/sessions/{id}/cells/{cell_id}/run", post(run))
        .route("/sessions/{id}/cells/{cell_id}/suggest", post(suggest))
        .route("/sessions/{id}/cells/{cell_id}/ephemeral-ui", post(ephemeral_ui))
        .route("/sessions/{id}/panels/{panel_id}/submit", post(submit))
        .route("/sessions/{id}/events", get(events))
        .with_state(engine)
}

/// Binds `addr` and serves until `shutdown` resolves.
pub async fn serve(
    engine: Arc<Engine>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine)).with_graceful_shutdown(shutdown).await
}

/// Serves on an already bound listener, returning the bound address.
pub async fn spawn(
    engine: Arc<Engine>,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, router(engine)).await;
    });
    Ok((local, task))
}
