//! In-process OpenAI-compatible chat endpoint for recording fixtures and
//! exercising the live backend without network access.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use super::live::AGENT_HEADER;
use super::stub::{StubBackend, StubRequest};
use super::{AgentId, ChatMessage};

#[derive(Debug, Clone)]
pub struct MockRequest {
    pub agent_id: Option<AgentId>,
    pub authorization: Option<String>,
    pub body: Value,
}

struct MockState {
    responses: StubBackend,
    fail_next: AtomicU32,
    requests: Mutex<Vec<MockRequest>>,
}

pub struct MockChatServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    task: JoinHandle<()>,
}

impl MockChatServer {
    /// Serves `responses` on an ephemeral localhost port.
    pub async fn start(responses: StubBackend) -> std::io::Result<Self> {
        let state = Arc::new(MockState { responses, fail_next: AtomicU32::new(0), requests: Mutex::default() });
        let app = Router::new().route("/chat/completions", post(handle)).with_state(state.clone());
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0)).await?;
        let addr = listener.local_addr()?;
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, state, task })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// The next `n` requests are answered with 503.
    pub fn fail_next(&self, n: u32) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn requests(&self) -> Vec<MockRequest> {
        self.state.requests.lock().unwrap().clone()
    }
}

impl Drop for MockChatServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Recovers `widget.<label>` slots from the `- Label: value` lines the code
/// injector prompt lists, so template responders work over the wire too.
fn state_slots(user_content: &str) -> BTreeMap<String, String> {
    let Some((_, rest)) = user_content.split_once("Selected values:\n") else {
        return BTreeMap::new();
    };
    rest.lines()
        .map_while(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_once(": "))
        .map(|(label, value)| (format!("widget.{label}"), value.to_string()))
        .collect()
}

async fn handle(State(state): State<Arc<MockState>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let agent_id = headers.get(AGENT_HEADER).and_then(|v| v.to_str().ok()).and_then(|s| s.parse::<AgentId>().ok());
    let authorization = headers.get("authorization").and_then(|v| v.to_str().ok()).map(String::from);
    state.requests.lock().unwrap().push(MockRequest { agent_id, authorization, body: body.clone() });

    if state.fail_next.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
        return (StatusCode::SERVICE_UNAVAILABLE, "unavailable").into_response();
    }
    let Some(agent_id) = agent_id else {
        return (StatusCode::BAD_REQUEST, "missing agent header").into_response();
    };
    let messages: Vec<ChatMessage> = serde_json::from_value(body["messages"].clone()).unwrap_or_default();
    let user_content = messages.last().map(|m| m.content.clone()).unwrap_or_default();
    let slots = state_slots(&user_content);
    let request = StubRequest { agent_id, messages: &messages, user_content: &user_content, slots: &slots };
    match state.responses.respond(&request) {
        Some(text) => Json(json!({
            "id": "mock",
            "object": "chat.completion",
            "model": body["model"],
            "choices": [{"index": 0, "finish_reason": "stop", "message": {"role": "assistant", "content": text}}],
        }))
        .into_response(),
        None => (StatusCode::NOT_FOUND, format!("no response registered for {agent_id}")).into_response(),
    }
}
