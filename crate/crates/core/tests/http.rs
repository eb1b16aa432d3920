use std::net::SocketAddr;
use std::time::Duration;

use eui_engine::session::http::{self, NotebookView, OpenResponse};
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

mod common;

struct Server {
    base: String,
    addr: SocketAddr,
    client: reqwest::Client,
    _dir: tempfile::TempDir,
    session: String,
}

async fn start() -> Server {
    let engine = common::responses_engine("image_sampling");
    let (addr, _task) = http::spawn(engine, ([127, 0, 0, 1], 0).into()).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let client = reqwest::Client::new();
    let base = format!("http://{addr}");
    let body = json!({"notebook_path": common::notebook_fixture(), "save_path": dir.path().join("nb.ipynb")});
    let res = client.post(format!("{base}/sessions")).json(&body).send().await.unwrap();
    assert_eq!(res.status(), 200);
    let open: OpenResponse = res.json().await.unwrap();
    Server { base, addr, client, _dir: dir, session: open.session_id }
}

impl Server {
    async fn post(&self, path: &str) -> (u16, Value) {
        let res = self.client.post(format!("{}/sessions/{}/{path}", self.base, self.session)).send().await.unwrap();
        let status = res.status().as_u16();
        (status, res.json().await.unwrap())
    }

    async fn socket(
        &self,
        since: u64,
    ) -> tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>> {
        let url = format!("ws://{}/sessions/{}/events?since={since}", self.addr, self.session);
        tokio_tungstenite::connect_async(url).await.unwrap().0
    }
}

async fn next_json<S>(ws: &mut S) -> Value
where
    S: futures::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let msg =
            tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("event in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

#[tokio::test]
async fn full_flow_over_http_and_socket() {
    let server = start().await;
    let (status, run) = server.post("cells/load-data/run").await;
    assert_eq!(status, 200);
    assert_eq!(run["stdout"], "90 images with labels bird, cat, dog\n");

    let mut ws = server.socket(0).await;
    let backlog = next_json(&mut ws).await;
    assert_eq!((backlog["kind"].as_str(), backlog["server_seq"].as_u64()), (Some("exec_output"), Some(1)));
    assert_eq!(next_json(&mut ws).await["kind"], "notebook_changed");

    let (status, render) = server.post("cells/ask-sample/ephemeral-ui").await;
    assert_eq!(status, 200);
    let panel = render["panel_id"].as_str().unwrap().to_string();
    let live = next_json(&mut ws).await;
    assert_eq!(live["kind"], "panel_render");
    assert_eq!(live["payload"]["manifest"]["widgets"].as_array().unwrap().len(), 3);
    assert_eq!(live["payload"]["html"], render["html"]);

    let size = render["manifest"]["widgets"].as_array().unwrap().iter().find(|w| w["label"] == "Sample Size").unwrap()
        ["element_id"]
        .clone();
    let ev = json!({"panel_id": panel, "element_id": size, "value": 7, "sequence_no": 1});
    ws.send(Message::Text(ev.to_string().into())).await.unwrap();
    let ack = next_json(&mut ws).await;
    assert_eq!(ack["kind"], "widget_ack");
    assert_eq!(ack["payload"]["ok"], true);
    assert_eq!(ack["payload"]["value"], 7);

    let bad = json!({"panel_id": panel, "element_id": size, "value": 99, "sequence_no": 2});
    ws.send(Message::Text(bad.to_string().into())).await.unwrap();
    let ack = next_json(&mut ws).await;
    assert_eq!(ack["payload"]["ok"], false);
    assert_eq!(ack["payload"]["error"]["kind"], "ValueOutOfDomain");
    assert_eq!(ack["payload"]["value"], 7);

    ws.send(Message::Text("not json".into())).await.unwrap();
    let err = next_json(&mut ws).await;
    assert_eq!(err["kind"], "protocol_error");
    assert!(err.get("server_seq").is_none());

    let (status, injected) = server.post(&format!("panels/{panel}/submit")).await;
    assert_eq!(status, 200);
    assert!(injected["code"].as_str().unwrap().contains(r#"show_sample("cat", 7)"#));
    assert_eq!(next_json(&mut ws).await["kind"], "cell_injected");
    assert_eq!(next_json(&mut ws).await["kind"], "notebook_changed");

    let view: NotebookView = server
        .client
        .get(format!("{}/sessions/{}/notebook", server.base, server.session))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(view.active_panel.as_ref().map(|p| p.as_str()), Some(panel.as_str()));
    let ids: Vec<&str> = view.cells.iter().map(|c| c.id.as_str()).collect();
    let pos = ids.iter().position(|i| *i == "ask-sample").unwrap();
    assert_eq!(ids[pos + 1], injected["new_cell_id"].as_str().unwrap());
    assert_eq!(view.cells[pos + 1].prompt_cell_id.as_ref().map(|c| c.as_str()), Some("ask-sample"));
}

#[tokio::test]
async fn reconnect_resumes_after_since() {
    let server = start().await;
    server.post("cells/load-data/run").await;
    server.post("cells/define-model/run").await;
    let mut ws = server.socket(2).await;
    let first = next_json(&mut ws).await;
    assert_eq!(first["server_seq"], 3);
    assert_eq!(first["payload"]["cell_id"], "define-model");
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let server = start().await;
    let (status, body) = server.post("cells/nope/run").await;
    assert_eq!((status, body["error"]["kind"].as_str()), (404, Some("UnknownCell")));
    let (status, body) = server.post("cells/ask-sample/run").await;
    assert_eq!((status, body["error"]["kind"].as_str()), (400, Some("NotExecutable")));
    let (status, body) = server.post("cells/load-data/suggest").await;
    assert_eq!((status, body["error"]["kind"].as_str()), (400, Some("NotAPromptCell")));
    let (status, body) = server.post("panels/panel-3/submit").await;
    assert_eq!((status, body["error"]["kind"].as_str()), (409, Some("StalePanel")));

    let res = server.client.post(format!("{}/sessions/ghost/cells/a/run", server.base)).send().await.unwrap();
    assert_eq!(res.status(), 404);
    let body: Value = res.json().await.unwrap();
    assert_eq!(body["error"]["kind"], "UnknownSession");

    let res = server
        .client
        .post(format!("{}/sessions", server.base))
        .json(&json!({"notebook_path": "/does/not/exist.ipynb"}))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 422);

    let url = format!("ws://{}/sessions/ghost/events", server.addr);
    assert!(tokio_tungstenite::connect_async(url).await.is_err());
}
