//! Long-lived Python interpreter sessions.
//!
//! Each [`KernelSession`] owns one interpreter process running the bundled
//! driver script. Requests go through a single FIFO lane (an actor task that
//! owns the process pipes), so executions, compile checks and global reads or
//! writes never interleave mid-operation. Dropping a caller's future never
//! desynchronises the lane: the actor finishes the exchange on its own.

mod value;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::widgets::{NumericRange, WidgetKind};

pub use value::{SyncValue, Unrepresentable};

const DRIVER: &str = include_str!("../../python/driver.py");
const TOOLKIT: &str = include_str!("../../python/toolkit.py");

/// Name the widget toolkit is bound to inside the kernel namespace.
pub const TOOLKIT_MODULE: &str = "_eui";
/// Reserved prefix of widget-bound kernel globals.
pub const BINDING_PREFIX: &str = "__eui_";

const STARTUP_TIMEOUT: Duration = Duration::from_secs(15);
const INTERRUPT_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("failed to start kernel: {0}")]
    SpawnFailure(String),
    #[error("execution exceeded {}s timeout{}", .after.as_secs_f64(), if *.killed { " (kernel killed)" } else { "" })]
    Timeout { after: Duration, killed: bool },
    #[error("kernel is dead")]
    KernelDead,
    #[error("unknown global `{0}`")]
    UnknownGlobal(String),
    #[error("unrepresentable value: {0}")]
    UnrepresentableValue(String),
    #[error("kernel protocol error: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelState {
    Starting,
    Idle,
    Busy,
    Dead,
}

#[derive(Debug, Clone)]
pub struct KernelConfig {
    pub python: String,
    pub working_dir: PathBuf,
    pub timeout: Duration,
    pub memory_mb: Option<u64>,
    /// Environment variables copied from the parent; everything else is cleared.
    pub env_allowlist: Vec<String>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            python: "python3".into(),
            working_dir: PathBuf::from("."),
            timeout: Duration::from_secs(30),
            memory_mb: Some(4096),
            env_allowlist: ["PATH", "HOME", "LANG", "LC_ALL", "PYTHONPATH", "TMPDIR", "USER"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecError {
    #[serde(rename = "type")]
    pub ename: String,
    pub message: String,
    pub traceback: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub ok: bool,
    pub stdout: String,
    pub stderr: String,
    pub error: Option<ExecError>,
    pub value_repr: Option<String>,
    pub duration_ms: u64,
}

/// Syntax diagnostic from a compile check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: Option<u32>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// A widget registered by a toolkit constructor during the last widget run.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RegisteredWidget {
    pub element_id: u32,
    pub widget_kind: WidgetKind,
    pub label: String,
    pub binding: String,
    #[serde(default)]
    pub description: String,
    pub options: Option<Vec<String>>,
    pub range: Option<NumericRange>,
    pub html: String,
    pub value: Option<Value>,
    pub value_error: Option<String>,
}

/// Widget snippets after binding names were rewritten to reserved globals.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct RewrittenSnippets {
    pub globals: String,
    pub widgets: String,
    /// element id → global name
    pub bindings: BTreeMap<u32, String>,
    /// names assigned at the top level of the globals snippet
    pub declared: Vec<String>,
}

struct Job {
    request: Value,
    timeout: Duration,
    interruptible: bool,
    reply: oneshot::Sender<Result<Value>>,
}

pub struct KernelSession {
    id: String,
    pid: u32,
    timeout: Duration,
    jobs: mpsc::UnboundedSender<Job>,
    state: Arc<Mutex<KernelState>>,
    cancel: CancellationToken,
    actor: tokio::sync::Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for KernelSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSession")
            .field("id", &self.id)
            .field("pid", &self.pid)
            .field("state", &self.state())
            .finish()
    }
}

impl KernelSession {
    pub async fn start(id: impl Into<String>, config: &KernelConfig) -> Result<Self> {
        let id = id.into();
        let mut cmd = Command::new(&config.python);
        cmd.arg("-u")
            .arg("-c")
            .arg(DRIVER)
            .current_dir(&config.working_dir)
            .env_clear()
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .kill_on_drop(true);
        for key in &config.env_allowlist {
            if let Ok(value) = std::env::var(key) {
                cmd.env(key, value);
            }
        }
        cmd.env("PYTHONDONTWRITEBYTECODE", "1");

        let mut child = cmd.spawn().map_err(|e| KernelError::SpawnFailure(format!("{}: {e}", config.python)))?;
        let pid = child.id().ok_or_else(|| KernelError::SpawnFailure("no pid".into()))?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let mut lines = BufReader::new(child.stdout.take().expect("stdout is piped")).lines();

        let init = json!({"op": "init", "toolkit": TOOLKIT, "memory_mb": config.memory_mb});
        let handshake = async {
            write_request(&mut stdin, &init).await?;
            read_reply(&mut lines).await
        };
        match tokio::time::timeout(STARTUP_TIMEOUT, handshake).await {
            Ok(Ok(reply)) if reply["ok"] == true => {}
            Ok(Ok(reply)) => return Err(KernelError::SpawnFailure(format!("driver init failed: {reply}"))),
            Ok(Err(e)) => return Err(KernelError::SpawnFailure(e.to_string())),
            Err(_) => return Err(KernelError::SpawnFailure("driver did not start in time".into())),
        }

        let state = Arc::new(Mutex::new(KernelState::Idle));
        let cancel = CancellationToken::new();
        let (tx, rx) = mpsc::unbounded_channel();
        let actor = tokio::spawn(run_lane(child, stdin, lines, rx, state.clone(), cancel.clone()));
        tracing::debug!(session = %id, pid, "kernel started");
        Ok(Self {
            id,
            pid,
            timeout: config.timeout,
            jobs: tx,
            state,
            cancel,
            actor: tokio::sync::Mutex::new(Some(actor)),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// OS process id of the interpreter.
    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn state(&self) -> KernelState {
        *self.state.lock().unwrap()
    }

    pub fn default_timeout(&self) -> Duration {
        self.timeout
    }

    async fn request(&self, request: Value, timeout: Duration, interruptible: bool) -> Result<Value> {
        let (reply, rx) = oneshot::channel();
        self.jobs.send(Job { request, timeout, interruptible, reply }).map_err(|_| KernelError::KernelDead)?;
        rx.await.map_err(|_| KernelError::KernelDead)?
    }

    async fn op(&self, request: Value) -> Result<Value> {
        let reply = self.request(request, self.timeout, false).await?;
        if reply["ok"] == true {
            return Ok(reply);
        }
        let message = reply["message"].as_str().unwrap_or_default().to_string();
        Err(match reply["error"].as_str() {
            Some("UnknownGlobal") => KernelError::UnknownGlobal(message),
            Some("UnrepresentableValue") => KernelError::UnrepresentableValue(message),
            _ => KernelError::Protocol(reply.to_string()),
        })
    }

    /// Runs code in the session namespace. `None` uses the configured timeout.
    pub async fn execute(&self, code: &str, timeout: Option<Duration>) -> Result<ExecResult> {
        let timeout = timeout.unwrap_or(self.timeout);
        let started = Instant::now();
        let reply = self.request(json!({"op": "execute", "code": code}), timeout, true).await?;
        let duration_ms = started.elapsed().as_millis() as u64;
        let error = match &reply["error"] {
            Value::Null => None,
            e => Some(serde_json::from_value(e.clone()).map_err(|e| KernelError::Protocol(e.to_string()))?),
        };
        Ok(ExecResult {
            ok: reply["ok"] == true,
            stdout: reply["stdout"].as_str().unwrap_or_default().to_string(),
            stderr: reply["stderr"].as_str().unwrap_or_default().to_string(),
            error,
            value_repr: reply["value_repr"].as_str().map(String::from),
            duration_ms,
        })
    }

    /// Syntax/compile validation without execution. The outer error is a
    /// kernel failure; the inner one is the diagnostic for bad code.
    pub async fn compile_check(&self, code: &str) -> Result<std::result::Result<(), Diagnostic>> {
        let reply = self.request(json!({"op": "compile", "code": code}), self.timeout, false).await?;
        if reply["ok"] == true {
            return Ok(Ok(()));
        }
        Ok(Err(Diagnostic {
            line: reply["line"].as_u64().map(|l| l as u32),
            message: reply["message"].as_str().unwrap_or("compile error").to_string(),
        }))
    }

    pub async fn get_global(&self, name: &str) -> Result<SyncValue> {
        let reply = self.op(json!({"op": "get_global", "name": name})).await?;
        SyncValue::new(reply["value"].clone()).map_err(|e| KernelError::UnrepresentableValue(e.0))
    }

    /// Reads several globals in one lane operation.
    pub async fn get_globals(&self, names: &[String]) -> Result<Vec<SyncValue>> {
        let reply = self.op(json!({"op": "get_globals", "names": names})).await?;
        let values = reply["values"].as_array().cloned().unwrap_or_default();
        names
            .iter()
            .zip(values)
            .map(|(name, v)| {
                if v["ok"] == true {
                    SyncValue::new(v["value"].clone()).map_err(|e| KernelError::UnrepresentableValue(e.0))
                } else if v["error"] == "UnknownGlobal" {
                    Err(KernelError::UnknownGlobal(name.clone()))
                } else {
                    Err(KernelError::UnrepresentableValue(v["message"].as_str().unwrap_or(name).to_string()))
                }
            })
            .collect()
    }

    pub async fn set_global(&self, name: &str, value: &SyncValue) -> Result<()> {
        self.op(json!({"op": "set_global", "name": name, "value": value.as_json()})).await?;
        Ok(())
    }

    /// Sorted names of user-visible globals starting with `prefix`.
    pub async fn list_globals(&self, prefix: &str) -> Result<Vec<String>> {
        let reply = self.op(json!({"op": "list_globals", "prefix": prefix})).await?;
        serde_json::from_value(reply["names"].clone()).map_err(|e| KernelError::Protocol(e.to_string()))
    }

    /// Content hash over the sorted (name, repr) pairs of user-visible globals.
    pub async fn namespace_digest(&self) -> Result<String> {
        let reply = self.op(json!({"op": "digest"})).await?;
        Ok(reply["digest"].as_str().unwrap_or_default().to_string())
    }

    pub async fn toolkit_reset(&self) -> Result<()> {
        self.op(json!({"op": "toolkit_reset"})).await?;
        Ok(())
    }

    /// Widgets registered since the last reset, with their bound globals'
    /// current values, read in one lane operation.
    pub async fn toolkit_state(&self) -> Result<Vec<RegisteredWidget>> {
        let reply = self.op(json!({"op": "toolkit_state"})).await?;
        serde_json::from_value(reply["widgets"].clone()).map_err(|e| KernelError::Protocol(e.to_string()))
    }

    /// Renames the bindings used by toolkit constructor calls to
    /// `__eui_<element_id>` in both snippets.
    pub async fn rewrite_bindings(
        &self,
        globals: &str,
        widgets: &str,
    ) -> Result<std::result::Result<RewrittenSnippets, Diagnostic>> {
        let kinds: Vec<&str> = WidgetKind::ALL.iter().map(|k| k.as_str()).collect();
        let reply = self
            .request(
                json!({"op": "rewrite_bindings", "globals": globals, "widgets": widgets, "kinds": kinds}),
                self.timeout,
                false,
            )
            .await?;
        if reply["ok"] != true {
            if reply.get("line").is_none() {
                return Err(KernelError::Protocol(reply.to_string()));
            }
            return Ok(Err(Diagnostic {
                line: reply["line"].as_u64().map(|l| l as u32),
                message: reply["message"].as_str().unwrap_or("rewrite failed").to_string(),
            }));
        }
        let raw: RawRewrite = serde_json::from_value(reply).map_err(|e| KernelError::Protocol(e.to_string()))?;
        let bindings = raw
            .bindings
            .into_iter()
            .map(|(k, v)| k.parse::<u32>().map(|k| (k, v)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| KernelError::Protocol(e.to_string()))?;
        Ok(Ok(RewrittenSnippets { globals: raw.globals, widgets: raw.widgets, bindings, declared: raw.declared }))
    }

    /// Kills the interpreter and waits for it to be reaped. Idempotent.
    pub async fn shutdown(&self) {
        self.cancel.cancel();
        let actor = self.actor.lock().await.take();
        if let Some(actor) = actor {
            let _ = actor.await;
        }
        *self.state.lock().unwrap() = KernelState::Dead;
    }
}

#[derive(Deserialize)]
struct RawRewrite {
    globals: String,
    widgets: String,
    bindings: BTreeMap<String, String>,
    declared: Vec<String>,
}

impl Drop for KernelSession {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

async fn write_request(stdin: &mut ChildStdin, request: &Value) -> Result<()> {
    let mut line = serde_json::to_vec(request).map_err(|e| KernelError::Protocol(e.to_string()))?;
    line.push(b'\n');
    stdin.write_all(&line).await.map_err(|_| KernelError::KernelDead)?;
    stdin.flush().await.map_err(|_| KernelError::KernelDead)
}

async fn read_reply(lines: &mut Lines<BufReader<ChildStdout>>) -> Result<Value> {
    match lines.next_line().await {
        Ok(Some(line)) => serde_json::from_str(&line).map_err(|e| KernelError::Protocol(format!("{e}: {line}"))),
        Ok(None) | Err(_) => Err(KernelError::KernelDead),
    }
}

fn interrupt(pid: u32) {
    // SAFETY: plain signal delivery to a child we spawned and still own.
    unsafe {
        libc::kill(pid as libc::pid_t, libc::SIGINT);
    }
}

async fn exchange(
    child: &mut Child,
    stdin: &mut ChildStdin,
    lines: &mut Lines<BufReader<ChildStdout>>,
    job: &Job,
) -> Result<Value> {
    write_request(stdin, &job.request).await?;
    match tokio::time::timeout(job.timeout, read_reply(lines)).await {
        Ok(reply) => reply,
        Err(_) => {
            if job.interruptible {
                if let Some(pid) = child.id() {
                    interrupt(pid);
                    if let Ok(Ok(_)) = tokio::time::timeout(INTERRUPT_GRACE, read_reply(lines)).await {
                        return Err(KernelError::Timeout { after: job.timeout, killed: false });
                    }
                }
            }
            let _ = child.start_kill();
            Err(KernelError::Timeout { after: job.timeout, killed: true })
        }
    }
}

async fn run_lane(
    mut child: Child,
    mut stdin: ChildStdin,
    mut lines: Lines<BufReader<ChildStdout>>,
    mut jobs: mpsc::UnboundedReceiver<Job>,
    state: Arc<Mutex<KernelState>>,
    cancel: CancellationToken,
) {
    let set = |s: KernelState| *state.lock().unwrap() = s;
    loop {
        let job = tokio::select! {
            _ = cancel.cancelled() => break,
            job = jobs.recv() => match job {
                Some(job) => job,
                None => break,
            },
        };
        set(KernelState::Busy);
        let outcome = tokio::select! {
            r = exchange(&mut child, &mut stdin, &mut lines, &job) => r,
            _ = cancel.cancelled() => {
                let _ = job.reply.send(Err(KernelError::KernelDead));
                break;
            }
        };
        let dead = matches!(outcome, Err(KernelError::KernelDead) | Err(KernelError::Timeout { killed: true, .. }));
        let _ = job.reply.send(outcome);
        if dead {
            break;
        }
        set(KernelState::Idle);
    }
    set(KernelState::Dead);
    jobs.close();
    let _ = child.start_kill();
    let _ = child.wait().await;
    while let Ok(job) = jobs.try_recv() {
        let _ = job.reply.send(Err(KernelError::KernelDead));
    }
}
