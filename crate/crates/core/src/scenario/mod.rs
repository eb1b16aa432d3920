//! Scripted headless sessions: open a notebook, press the buttons, move
//! widgets, submit, and check what the engine said.
//!
//! A script is JSON:
//!
//! ```json
//! {
//!   "notebook_path": "../ml_tutorial.ipynb",
//!   "llm_mode": "replay",
//!   "transcripts": "../transcripts/image_sampling.json",
//!   "steps": [
//!     {"op": "run_cell", "cell": "load-data"},
//!     {"op": "trigger_ui", "cell": "ask-sample", "as": "panel"},
//!     {"op": "assert", "event": "panel_render",
//!      "where": [{"path": "payload.manifest.widgets.*.widget_kind", "equals": "slider"}]},
//!     {"op": "widget_event", "panel": "${panel}", "widget": "Sample Size", "value": 20},
//!     {"op": "submit", "panel": "${panel}", "as": "code"},
//!     {"op": "assert", "cell": {"id": "${code}", "below": "ask-sample", "origin": "injected"}}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the script's directory. `${name}` refers
//! to a panel bound by `trigger_ui … as` or a cell bound by `submit … as`.
//! Event assertions look at the events of the previous non-assert step
//! unless `"scope": "all"` is given. Paths follow [`path::JsonPath`].

pub mod path;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};

use crate::config::EngineConfig;
use crate::kernel::{KernelError, SyncValue};
use crate::llm::mock::MockChatServer;
use crate::llm::{AgentId, BackendKind, LiveConfig, LlmGateway, Responder, StubBackend, TranscriptStore};
use crate::notebook::{self, CellId, CellKind, NotebookDoc, NotebookError, Origin};
use crate::pipeline::{KernelFailure, PipelineError};
use crate::session::{build_gateway, Engine, EventPayload, OpenOptions, ServerEvent, Session, SessionError};
use crate::widgets::{PanelId, WidgetEvent, WidgetManifest};

use self::path::JsonPath;

/// Trace field holding the wall-clock part of a line.
pub const TIMING_FIELD: &str = "timing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StubText {
    Inline(String),
    File { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default)]
    pub name: String,
    pub notebook_path: PathBuf,
    #[serde(default)]
    pub llm_mode: Option<BackendKind>,
    #[serde(default)]
    pub transcripts: Option<PathBuf>,
    /// Optional `engine.toml`.
    #[serde(default)]
    pub config: Option<PathBuf>,
    /// Canned responses per agent for stub mode, served in order; the last
    /// one repeats. `{widget.<label>}` placeholders are filled with the
    /// selected widget values.
    #[serde(default)]
    pub stubs: BTreeMap<AgentId, Vec<StubText>>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    RunCell {
        cell: String,
    },
    TriggerSuggest {
        cell: String,
    },
    TriggerUi {
        cell: String,
        #[serde(rename = "as", default, skip_serializing_if = "Option::is_none")]
        alias: Option<String>,
    },
    WidgetEvent {
        panel: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        element_id: Option<u32>,
        /// Widget label, as an alternative to `element_id`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        widget: Option<String>,
        value: Value,
        /// Defaults to one more than the last number sent to this panel.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sequence_no: Option<u64>,
    },
    Submit {
        panel: String,
        #[serde(rename = "as", default, skip_serializing_if = "Option::is_none")]
        alias: Option<String>,
    },
    Assert(Assertion),
}

impl Step {
    pub fn op(&self) -> &'static str {
        match self {
            Step::RunCell { .. } => "run_cell",
            Step::TriggerSuggest { .. } => "trigger_suggest",
            Step::TriggerUi { .. } => "trigger_ui",
            Step::WidgetEvent { .. } => "widget_event",
            Step::Submit { .. } => "submit",
            Step::Assert(_) => "assert",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Step,
    All,
}

fn present<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    /// Exact number of matching events; at least one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(rename = "where", default, skip_serializing_if = "Vec::is_empty")]
    pub predicates: Vec<Predicate>,
    #[serde(default)]
    pub scope: Scope,
    /// Expected cell ids of the whole notebook, in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notebook: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<CellCheck>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub path: String,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub equals: Option<Value>,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub contains: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exists: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCheck {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CellKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    /// Id of the cell directly above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Passed,
    AssertionFailed { step: usize, message: String },
    EngineError { step: Option<usize>, message: String },
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Passed => 0,
            Outcome::AssertionFailed { .. } => 1,
            Outcome::EngineError { .. } => 2,
        }
    }

    pub fn passed(&self) -> bool {
        *self == Outcome::Passed
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Passed => f.write_str("passed"),
            Outcome::AssertionFailed { step, message } => write!(f, "assertion failed at step {step}: {message}"),
            Outcome::EngineError { step: Some(step), message } => write!(f, "engine error at step {step}: {message}"),
            Outcome::EngineError { step: None, message } => write!(f, "engine error: {message}"),
        }
    }
}

#[derive(Debug)]
pub struct ScenarioReport {
    pub name: String,
    pub outcome: Outcome,
    /// One JSON object per event, with a `timing` field.
    pub trace: Vec<Value>,
    pub notebook: Option<NotebookDoc>,
    /// Where the notebook was saved, if kept.
    pub saved_notebook: Option<PathBuf>,
    /// Exchanges captured when the gateway was recording.
    pub transcripts: Option<TranscriptStore>,
    pub steps_run: usize,
    pub elapsed: Duration,
}

impl ScenarioReport {
    fn failed(name: String, outcome: Outcome, started: Instant) -> Self {
        Self {
            name,
            outcome,
            trace: Vec::new(),
            notebook: None,
            saved_notebook: None,
            transcripts: None,
            steps_run: 0,
            elapsed: started.elapsed(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.outcome.exit_code()
    }

    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.trace {
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn masked_trace(&self) -> String {
        mask_trace(&self.trace_jsonl())
    }
}

/// Drops the timing field from every line of a JSON-lines trace.
pub fn mask_trace(jsonl: &str) -> String {
    let mut out = String::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<Value>(line) {
            Ok(mut v) => {
                if let Some(obj) = v.as_object_mut() {
                    obj.remove(TIMING_FIELD);
                }
                out.push_str(&v.to_string());
            }
            Err(_) => out.push_str(line),
        }
        out.push('\n');
    }
    out
}

fn trace_line(ev: &ServerEvent) -> Value {
    let mut v = serde_json::to_value(ev).expect("events serialize");
    if let Some(obj) = v.as_object_mut() {
        obj.insert(TIMING_FIELD.into(), json!({"elapsed_ms": ev.elapsed_ms}));
    }
    v
}

fn wire(ev: &ServerEvent) -> Value {
    serde_json::to_value(ev).expect("events serialize")
}

#[derive(Default)]
pub struct RunOptions {
    pub llm_mode: Option<BackendKind>,
    /// Keep the edited notebook here; otherwise it goes to a temporary file
    /// that is removed afterwards.
    pub out_notebook: Option<PathBuf>,
    /// Replaces the configured backend, e.g. a recording live gateway.
    pub gateway: Option<LlmGateway>,
    pub config: Option<EngineConfig>,
}

#[derive(Debug, Clone)]
pub struct LoadedScript {
    pub script: ScenarioScript,
    pub base_dir: PathBuf,
}

impl LoadedScript {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let script: ScenarioScript = serde_path_to_error::deserialize(de)
            .map_err(|e| format!("invalid script at `{}`: {}", e.path(), e.inner()))?;
        Ok(Self { script, base_dir: base_dir.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn notebook_path(&self) -> PathBuf {
        self.resolve(&self.script.notebook_path)
    }

    fn stub_backend(&self) -> Result<Option<StubBackend>, String> {
        if self.script.stubs.is_empty() {
            return Ok(None);
        }
        let stub = StubBackend::new();
        for (agent, texts) in &self.script.stubs {
            let mut responses = Vec::with_capacity(texts.len());
            for t in texts {
                responses.push(match t {
                    StubText::Inline(s) => s.clone(),
                    StubText::File { file } => {
                        let p = self.resolve(file);
                        std::fs::read_to_string(&p).map_err(|e| format!("cannot read stub {}: {e}", p.display()))?
                    }
                });
            }
            if responses.is_empty() {
                return Err(format!("stub list for {agent} is empty"));
            }
            stub.register(*agent, Responder::TemplateSequence(responses));
        }
        Ok(Some(stub))
    }
}

static ALIAS_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$\{([^}]*)\}").expect("valid regex"));

fn valid_alias(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn strings_in(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|i| strings_in(i, out)),
        Value::Object(map) => map.values().for_each(|i| strings_in(i, out)),
        _ => {}
    }
}

fn substitute(v: &mut Value, aliases: &HashMap<String, String>) -> Result<(), String> {
    match v {
        Value::String(s) => {
            let mut missing = None;
            let replaced = ALIAS_REF.replace_all(s, |c: &regex::Captures<'_>| match aliases.get(&c[1]) {
                Some(bound) => bound.clone(),
                None => {
                    missing.get_or_insert_with(|| c[1].to_string());
                    String::new()
                }
            });
            if let Some(name) = missing {
                return Err(format!("`${{{name}}}` is not bound; the step that defines it did not succeed"));
            }
            *s = replaced.into_owned();
        }
        Value::Array(items) => {
            for i in items {
                substitute(i, aliases)?;
            }
        }
        Value::Object(map) => {
            for i in map.values_mut() {
                substitute(i, aliases)?;
            }
        }
        _ => {}
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum AliasKind {
    Panel,
    Cell,
}

/// JSON equality where numbers compare by value, so `30` equals `30.0`.
fn json_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_eq(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| json_eq(v, w)))
        }
        _ => a == b,
    }
}

impl Predicate {
    fn check_shape(&self) -> Result<(), String> {
        JsonPath::parse(&self.path)?;
        let ops = [
            self.equals.is_some(),
            self.contains.is_some(),
            self.exists.is_some(),
            self.len.is_some(),
            self.matches.is_some(),
        ];
        if ops.iter().filter(|b| **b).count() != 1 {
            return Err(format!(
                "predicate on `{}` needs exactly one of equals, contains, exists, len, matches",
                self.path
            ));
        }
        if let Some(re) = &self.matches {
            Regex::new(re).map_err(|e| format!("bad pattern `{re}`: {e}"))?;
        }
        Ok(())
    }

    /// Whether the predicate holds for `event`.
    pub fn holds(&self, event: &Value) -> bool {
        let Ok(path) = JsonPath::parse(&self.path) else {
            return false;
        };
        let found = path.eval(event);
        if let Some(want) = self.exists {
            return found.is_empty() != want;
        }
        if let Some(want) = &self.equals {
            return found.iter().any(|v| json_eq(v, want));
        }
        if let Some(want) = &self.contains {
            return found.iter().any(|v| match (v, want) {
                (Value::String(s), Value::String(sub)) => s.contains(sub.as_str()),
                (Value::Array(items), w) => items.iter().any(|i| json_eq(i, w)),
                _ => false,
            });
        }
        if let Some(n) = self.len {
            return found.iter().any(|v| match v {
                Value::Array(a) => a.len() == n,
                Value::Object(o) => o.len() == n,
                Value::String(s) => s.chars().count() == n,
                _ => false,
            });
        }
        if let Some(re) = &self.matches {
            let Ok(re) = Regex::new(re) else {
                return false;
            };
            return found.iter().any(|v| v.as_str().is_some_and(|s| re.is_match(s)));
        }
        false
    }

    fn describe(&self) -> String {
        let (op, v) = if let Some(v) = &self.equals {
            ("equals", v.to_string())
        } else if let Some(v) = &self.contains {
            ("contains", v.to_string())
        } else if let Some(v) = self.exists {
            ("exists", v.to_string())
        } else if let Some(v) = self.len {
            ("len", v.to_string())
        } else {
            ("matches", format!("{:?}", self.matches.as_deref().unwrap_or_default()))
        };
        format!("{} {op} {v}", self.path)
    }
}

/// Checks references and step shapes against the notebook before anything
/// runs. Returns the step index and the problem.
pub fn validate(script: &ScenarioScript, doc: &NotebookDoc) -> Result<(), (usize, String)> {
    let mut aliases: HashMap<String, AliasKind> = HashMap::new();
    let mut seen_action = false;

    for (i, step) in script.steps.iter().enumerate() {
        let fail = |m: String| Err((i, m));
        let as_value = serde_json::to_value(step).expect("steps serialize");
        let mut strings = Vec::new();
        strings_in(&as_value, &mut strings);
        for s in &strings {
            for c in ALIAS_REF.captures_iter(s) {
                if !aliases.contains_key(&c[1]) {
                    return fail(format!("`${{{}}}` is not defined by an earlier step", &c[1]));
                }
            }
        }

        let cell_ref = |id: &str, want: &[CellKind]| -> Result<(), String> {
            if let Some(c) = ALIAS_REF.captures(id) {
                if c.get(0).map(|m| m.as_str()) != Some(id) || aliases.get(&c[1]) != Some(&AliasKind::Cell) {
                    return Err(format!("`{id}` does not name a cell"));
                }
                return if want.is_empty() || want.contains(&CellKind::Code) {
                    Ok(())
                } else {
                    Err(format!("`{id}` is an injected code cell"))
                };
            }
            let cell = doc.cell(&CellId::new(id)).map_err(|_| format!("unknown cell `{id}`"))?;
            if !want.is_empty() && !want.contains(&cell.kind()) {
                return Err(format!("cell `{id}` is {:?}, expected {:?}", cell.kind(), want));
            }
            Ok(())
        };
        let panel_ref = |p: &str| -> Result<(), String> {
            match ALIAS_REF.captures(p) {
                Some(c) if c.get(0).map(|m| m.as_str()) == Some(p) && aliases.get(&c[1]) == Some(&AliasKind::Panel) => {
                    Ok(())
                }
                _ => Err(format!("`{p}` does not name a panel bound by an earlier trigger_ui")),
            }
        };

        let checked = match step {
            Step::RunCell { cell } => cell_ref(cell, &[CellKind::Code]),
            Step::TriggerSuggest { cell } | Step::TriggerUi { cell, .. } => cell_ref(cell, &[CellKind::Prompt]),
            Step::WidgetEvent { panel, element_id, widget, .. } => panel_ref(panel).and_then(|_| {
                if element_id.is_some() == widget.is_some() {
                    Err("widget_event needs exactly one of element_id, widget".into())
                } else {
                    Ok(())
                }
            }),
            Step::Submit { panel, .. } => panel_ref(panel),
            Step::Assert(a) => {
                let forms = [a.event.is_some(), a.notebook.is_some(), a.cell.is_some()];
                if forms.iter().filter(|b| **b).count() != 1 {
                    Err("assert needs exactly one of event, notebook, cell".into())
                } else if let Some(kind) = &a.event {
                    if !EventPayload::KINDS.contains(&kind.as_str()) {
                        Err(format!("unknown event kind `{kind}`"))
                    } else if a.scope == Scope::Step && !seen_action {
                        Err("event assertion before any action step".into())
                    } else {
                        a.predicates.iter().try_for_each(Predicate::check_shape)
                    }
                } else if a.count.is_some() || !a.predicates.is_empty() {
                    Err("count and where only apply to event assertions".into())
                } else if let Some(ids) = &a.notebook {
                    ids.iter().try_for_each(|id| cell_ref(id, &[]))
                } else {
                    let c = a.cell.as_ref().expect("one form is present");
                    cell_ref(&c.id, &[]).and_then(|_| c.below.as_deref().map_or(Ok(()), |b| cell_ref(b, &[])))
                }
            }
        };
        if let Err(m) = checked {
            return fail(m);
        }

        let (alias, kind) = match step {
            Step::TriggerUi { alias, .. } => (alias, AliasKind::Panel),
            Step::Submit { alias, .. } => (alias, AliasKind::Cell),
            _ => (&None, AliasKind::Cell),
        };
        if let Some(name) = alias {
            if !valid_alias(name) {
                return fail(format!("alias `{name}` must use letters, digits, `_` or `-`"));
            }
            aliases.insert(name.clone(), kind);
        }
        if !matches!(step, Step::Assert(_)) {
            seen_action = true;
        }
    }
    Ok(())
}

/// Errors that mean the run cannot go on, as opposed to failures the engine
/// reports through its events.
fn is_fault(e: &SessionError) -> bool {
    let dead = |k: &KernelError| {
        matches!(k, KernelError::KernelDead | KernelError::SpawnFailure(_) | KernelError::Protocol(_))
    };
    match e {
        SessionError::Setup(_) | SessionError::UnknownSession(_) => true,
        SessionError::Notebook(NotebookError::Io { .. } | NotebookError::MalformedNotebook { .. }) => true,
        SessionError::Kernel(k) => dead(k),
        SessionError::Pipeline(PipelineError::Backend(_)) => true,
        SessionError::Pipeline(PipelineError::Kernel(KernelFailure::Kernel(k))) => dead(k),
        _ => false,
    }
}

struct PanelTrack {
    manifest: WidgetManifest,
    next_seq: u64,
}

struct Runner<'a> {
    session: &'a Session,
    aliases: HashMap<String, String>,
    panels: HashMap<String, PanelTrack>,
    step_events: Vec<Value>,
}

enum StepError {
    Assertion(String),
    Fault(String),
}

impl Runner<'_> {
    fn last_seq(&self) -> u64 {
        self.session.events().last().map_or(0, |e| e.server_seq)
    }

    fn outcome<T>(&self, r: crate::session::Result<T>) -> Result<Option<T>, StepError> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(e) if is_fault(&e) => Err(StepError::Fault(format!("{}: {e}", e.kind()))),
            Err(_) => Ok(None),
        }
    }

    fn bind(&mut self, alias: &Option<String>, value: &str) {
        if let Some(a) = alias {
            self.aliases.insert(a.clone(), value.to_string());
        }
    }

    async fn run_step(&mut self, step: &Step) -> Result<(), StepError> {
        let mut v = serde_json::to_value(step).expect("steps serialize");
        substitute(&mut v, &self.aliases).map_err(StepError::Fault)?;
        let step: Step = serde_json::from_value(v).map_err(|e| StepError::Fault(e.to_string()))?;

        if let Step::Assert(a) = &step {
            return self.check(a).map_err(StepError::Assertion);
        }
        let before = self.last_seq();
        let s = self.session;
        match &step {
            Step::RunCell { cell } => {
                self.outcome(s.run_cell(&CellId::new(cell.as_str())).await)?;
            }
            Step::TriggerSuggest { cell } => {
                self.outcome(s.trigger_suggest(&CellId::new(cell.as_str())).await)?;
            }
            Step::TriggerUi { cell, alias } => {
                if let Some(render) = self.outcome(s.trigger_ephemeral_ui(&CellId::new(cell.as_str())).await)? {
                    let id = render.panel_id.as_str().to_string();
                    self.bind(alias, &id);
                    self.panels.insert(id, PanelTrack { manifest: render.manifest, next_seq: 1 });
                }
            }
            Step::WidgetEvent { panel, element_id, widget, value, sequence_no } => {
                let track = self
                    .panels
                    .get_mut(panel)
                    .ok_or_else(|| StepError::Fault(format!("no rendered panel `{panel}`")))?;
                let element_id = match (element_id, widget) {
                    (Some(id), _) => *id,
                    (None, Some(label)) => {
                        track.manifest.widgets.iter().find(|w| &w.label == label).map(|w| w.element_id).ok_or_else(
                            || {
                                let labels: Vec<&str> =
                                    track.manifest.widgets.iter().map(|w| w.label.as_str()).collect();
                                StepError::Fault(format!(
                                    "panel `{panel}` has no widget labelled `{label}` (has {labels:?})"
                                ))
                            },
                        )?
                    }
                    (None, None) => unreachable!("validated"),
                };
                let seq = sequence_no.unwrap_or(track.next_seq);
                track.next_seq = track.next_seq.max(seq + 1);
                let value = SyncValue::new(value.clone()).map_err(|e| StepError::Fault(e.to_string()))?;
                let event = WidgetEvent { panel_id: PanelId::new(panel.as_str()), element_id, value, sequence_no: seq };
                self.outcome(s.receive_widget_event(&event).await)?;
            }
            Step::Submit { panel, alias } => {
                if let Some(injected) = self.outcome(s.submit_panel(&PanelId::new(panel.as_str())).await)? {
                    self.bind(alias, injected.new_cell_id.as_str());
                }
            }
            Step::Assert(_) => unreachable!(),
        }
        self.step_events = s.events_since(before).iter().map(wire).collect();
        Ok(())
    }

    fn check(&self, a: &Assertion) -> Result<(), String> {
        if let Some(kind) = &a.event {
            let pool: Vec<Value> = match a.scope {
                Scope::Step => self.step_events.clone(),
                Scope::All => self.session.events().iter().map(wire).collect(),
            };
            let of_kind: Vec<&Value> = pool.iter().filter(|e| e["kind"] == kind.as_str()).collect();
            let matching = of_kind.iter().filter(|e| a.predicates.iter().all(|p| p.holds(e))).count();
            let ok = match a.count {
                Some(n) => matching == n,
                None => matching > 0,
            };
            if ok {
                return Ok(());
            }
            let want = a.count.map_or_else(|| "at least 1".to_string(), |n| n.to_string());
            let preds: Vec<String> = a.predicates.iter().map(Predicate::describe).collect();
            let seen: Vec<&str> = pool.iter().filter_map(|e| e["kind"].as_str()).collect();
            let mut msg = format!("expected {want} `{kind}` event(s)");
            if !preds.is_empty() {
                msg.push_str(&format!(" where {}", preds.join(" and ")));
            }
            msg.push_str(&format!(", found {matching} (events: {seen:?})"));
            if let Some(first) = of_kind.first() {
                msg.push_str(&format!("; first `{kind}` payload: {}", first["payload"]));
            }
            return Err(msg);
        }
        let doc = self.session.notebook();
        if let Some(ids) = &a.notebook {
            let actual: Vec<&str> = doc.cells().iter().map(|c| c.id().as_str()).collect();
            if actual != ids.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(format!("notebook order is {actual:?}, expected {ids:?}"));
            }
            return Ok(());
        }
        let c = a.cell.as_ref().expect("validated");
        let id = CellId::new(c.id.as_str());
        let cell = doc.cell(&id).map_err(|_| format!("cell `{}` is not in the notebook", c.id))?;
        if let Some(kind) = c.kind.filter(|k| *k != cell.kind()) {
            return Err(format!("cell `{}` is {:?}, expected {kind:?}", c.id, cell.kind()));
        }
        if let Some(origin) = c.origin.filter(|o| *o != cell.origin()) {
            return Err(format!("cell `{}` is {:?}, expected {origin:?}", c.id, cell.origin()));
        }
        if let Some(below) = &c.below {
            let idx = doc.index_of(&id).expect("cell exists");
            let above = idx.checked_sub(1).map(|i| doc.cells()[i].id().as_str());
            if above != Some(below.as_str()) {
                return Err(format!("cell `{}` sits below {above:?}, expected `{below}`", c.id));
            }
        }
        if let Some(missing) = c.contains.iter().find(|s| !cell.source().contains(s.as_str())) {
            return Err(format!("cell `{}` does not contain {missing:?}; source:\n{}", c.id, cell.source()));
        }
        if let Some(want) = c.equals.as_ref().filter(|w| *w != cell.source()) {
            return Err(format!("cell `{}` source is {:?}, expected {want:?}", c.id, cell.source()));
        }
        Ok(())
    }
}

fn temp_notebook_path() -> PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    std::env::temp_dir().join(format!("eui-scenario-{}-{}.ipynb", std::process::id(), N.fetch_add(1, Ordering::SeqCst)))
}

pub async fn run_scenario(path: impl AsRef<Path>, options: RunOptions) -> ScenarioReport {
    let started = Instant::now();
    match LoadedScript::load(path) {
        Ok(script) => run_loaded(&script, options).await,
        Err(message) => ScenarioReport::failed(String::new(), Outcome::EngineError { step: None, message }, started),
    }
}

pub async fn run_loaded(loaded: &LoadedScript, options: RunOptions) -> ScenarioReport {
    let started = Instant::now();
    let script = &loaded.script;
    let name = script.name.clone();
    let setup_error =
        |message: String| ScenarioReport::failed(name.clone(), Outcome::EngineError { step: None, message }, started);

    let mut config = match (options.config, &script.config) {
        (Some(c), _) => c,
        (None, Some(p)) => match EngineConfig::load(loaded.resolve(p)) {
            Ok(c) => c,
            Err(e) => return setup_error(e.to_string()),
        },
        (None, None) => EngineConfig::default(),
    };
    if let Some(mode) = options.llm_mode.or(script.llm_mode) {
        config.llm.mode = mode;
    }
    if let Some(t) = &script.transcripts {
        config.llm.transcripts = Some(loaded.resolve(t));
    }

    let notebook_path = loaded.notebook_path();
    let doc = match notebook::read_notebook(&notebook_path) {
        Ok(d) => d,
        Err(e) => return setup_error(e.to_string()),
    };
    if let Err((step, message)) = validate(script, &doc) {
        return ScenarioReport::failed(name, Outcome::EngineError { step: Some(step), message }, started);
    }

    let gateway = match options.gateway {
        Some(mut g) => {
            for agent in AgentId::ALL {
                g.set_config(config.agent_config(agent));
            }
            g
        }
        None => {
            let stub = match loaded.stub_backend() {
                Ok(s) => s,
                Err(e) => return setup_error(e),
            };
            match build_gateway(&config, stub) {
                Ok(g) => g,
                Err(e) => return setup_error(e.to_string()),
            }
        }
    };
    let engine = match Engine::with_gateway(config, gateway) {
        Ok(e) => Arc::new(e),
        Err(e) => return setup_error(e.to_string()),
    };

    let keep = options.out_notebook.is_some();
    let save_path = options.out_notebook.unwrap_or_else(temp_notebook_path);
    let session = match engine.open_session(OpenOptions::new(&notebook_path).save_to(&save_path)).await {
        Ok(s) => s,
        Err(e) => return setup_error(e.to_string()),
    };

    let mut runner =
        Runner { session: &session, aliases: HashMap::new(), panels: HashMap::new(), step_events: Vec::new() };
    let mut outcome = Outcome::Passed;
    let mut steps_run = 0;
    for (i, step) in script.steps.iter().enumerate() {
        tracing::debug!(step = i, op = step.op(), "scenario step");
        steps_run += 1;
        match runner.run_step(step).await {
            Ok(()) => {}
            Err(StepError::Assertion(message)) => {
                outcome = Outcome::AssertionFailed { step: i, message };
                break;
            }
            Err(StepError::Fault(message)) => {
                outcome = Outcome::EngineError { step: Some(i), message };
                break;
            }
        }
    }

    let trace = session.events().iter().map(trace_line).collect();
    let notebook = Some(session.notebook());
    let transcripts = engine.pipeline().gateway().recorded().ok();
    engine.shutdown().await;
    if !keep {
        let _ = std::fs::remove_file(&save_path);
    }
    ScenarioReport {
        name,
        outcome,
        trace,
        notebook,
        saved_notebook: keep.then_some(save_path),
        transcripts,
        steps_run,
        elapsed: started.elapsed(),
    }
}

/// Runs `loaded` against an in-process chat server that answers from the
/// `<agent_id>.txt` template responses in `responses_dir`, recording every
/// exchange into the report's transcripts.
pub async fn record_with_responses(
    loaded: &LoadedScript,
    responses_dir: &Path,
    mut options: RunOptions,
) -> Result<ScenarioReport, String> {
    let responses = StubBackend::from_dir(responses_dir)
        .map_err(|e| format!("cannot read responses in {}: {e}", responses_dir.display()))?;
    let server = MockChatServer::start(responses).await.map_err(|e| format!("cannot start chat server: {e}"))?;
    let gateway = LlmGateway::live(LiveConfig::new(server.base_url())).map_err(|e| e.to_string())?;
    options.gateway = Some(gateway.with_recording());
    Ok(run_loaded(loaded, options).await)
}

/// Every alias name a script binds, in order of first definition.
pub fn bound_aliases(script: &ScenarioScript) -> Vec<String> {
    let mut seen = HashSet::new();
    script
        .steps
        .iter()
        .filter_map(|s| match s {
            Step::TriggerUi { alias, .. } | Step::Submit { alias, .. } => alias.clone(),
            _ => None,
        })
        .filter(|a| seen.insert(a.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notebook::Cell;

    fn doc() -> NotebookDoc {
        NotebookDoc::from_cells(vec![
            Cell::code("load", "x = 1"),
            Cell::code("ask", "%prompt plot x"),
            Cell::markdown("md", "# notes"),
        ])
        .unwrap()
    }

    fn script(steps: Value) -> ScenarioScript {
        serde_json::from_value(json!({"notebook_path": "nb.ipynb", "steps": steps})).unwrap()
    }

    #[test]
    fn parses_every_step_form() {
        let s = script(json!([
            {"op": "run_cell", "cell": "load"},
            {"op": "trigger_suggest", "cell": "ask"},
            {"op": "trigger_ui", "cell": "ask", "as": "p"},
            {"op": "assert", "event": "panel_render", "where": [{"path": "payload.html", "contains": "Submit"}]},
            {"op": "widget_event", "panel": "${p}", "widget": "Size", "value": 20},
            {"op": "widget_event", "panel": "${p}", "element_id": 1, "value": "cat", "sequence_no": 7},
            {"op": "submit", "panel": "${p}", "as": "c"},
            {"op": "assert", "notebook": ["load", "ask", "${c}", "md"]},
            {"op": "assert", "cell": {"id": "${c}", "below": "ask", "origin": "injected", "contains": ["20"]}},
            {"op": "assert", "event": "widget_ack", "scope": "all", "count": 2, "where": [{"path": "payload.ok", "equals": null}]}
        ]));
        assert_eq!(s.steps.len(), 10);
        assert_eq!(validate(&s, &doc()), Ok(()));
        assert_eq!(bound_aliases(&s), vec!["p", "c"]);
        let Step::Assert(a) = &s.steps[9] else { panic!() };
        assert_eq!(a.predicates[0].equals, Some(Value::Null));
    }

    #[test]
    fn rejects_unknown_fields_and_ops() {
        let bad = [
            json!({"notebook_path": "n", "steps": [{"op": "click", "cell": "x"}]}),
            json!({"notebook_path": "n", "steps": [{"op": "run_cell", "cell": "x", "extra": 1}]}),
            json!({"notebook_path": "n", "steps": [], "mode": "stub"}),
        ];
        for b in bad {
            assert!(serde_json::from_value::<ScenarioScript>(b.clone()).is_err(), "{b}");
        }
    }

    #[test]
    fn static_validation() {
        let cases = [
            (json!([{"op": "run_cell", "cell": "nope"}]), "unknown cell"),
            (json!([{"op": "run_cell", "cell": "ask"}]), "expected"),
            (json!([{"op": "trigger_ui", "cell": "load"}]), "expected"),
            (json!([{"op": "trigger_ui", "cell": "md"}]), "expected"),
            (json!([{"op": "submit", "panel": "panel-1"}]), "does not name a panel"),
            (json!([{"op": "submit", "panel": "${p}"}]), "not defined"),
            (
                json!([{"op": "trigger_ui", "cell": "ask", "as": "p"}, {"op": "run_cell", "cell": "${p}"}]),
                "does not name a cell",
            ),
            (
                json!([{"op": "trigger_ui", "cell": "ask", "as": "p"},
                    {"op": "widget_event", "panel": "${p}", "value": 1}]),
                "exactly one of element_id",
            ),
            (json!([{"op": "assert", "event": "panel_render"}]), "before any action"),
            (json!([{"op": "run_cell", "cell": "load"}, {"op": "assert", "event": "nonsense"}]), "unknown event kind"),
            (
                json!([{"op": "run_cell", "cell": "load"},
                    {"op": "assert", "event": "exec_output", "where": [{"path": "a", "equals": 1, "exists": true}]}]),
                "exactly one of equals",
            ),
            (
                json!([{"op": "run_cell", "cell": "load"},
                    {"op": "assert", "event": "exec_output", "where": [{"path": "a", "matches": "("}]}]),
                "bad pattern",
            ),
            (json!([{"op": "assert", "notebook": ["load"], "cell": {"id": "load"}}]), "exactly one of event"),
            (json!([{"op": "assert", "notebook": ["load"], "count": 1}]), "only apply"),
            (json!([{"op": "trigger_ui", "cell": "ask", "as": "a b"}]), "alias"),
        ];
        for (steps, want) in cases {
            let err = validate(&script(steps.clone()), &doc()).expect_err(&steps.to_string());
            assert!(err.1.contains(want), "{steps}: {}", err.1);
        }
    }

    #[test]
    fn predicates() {
        let ev =
            json!({"kind": "panel_error", "payload": {"kind": "EmptyPlan", "message": "no elements", "list": [1, 2]}});
        let p = |v: Value| serde_json::from_value::<Predicate>(v).unwrap();
        assert!(p(json!({"path": "payload.kind", "equals": "EmptyPlan"})).holds(&ev));
        assert!(!p(json!({"path": "payload.kind", "equals": "CompileFailure"})).holds(&ev));
        assert!(p(json!({"path": "payload.message", "contains": "elements"})).holds(&ev));
        assert!(p(json!({"path": "payload.list", "contains": 2})).holds(&ev));
        assert!(p(json!({"path": "payload.list", "len": 2})).holds(&ev));
        assert!(p(json!({"path": "payload.cell_id", "exists": false})).holds(&ev));
        assert!(p(json!({"path": "payload.kind", "matches": "^Empty"})).holds(&ev));
        assert!(p(json!({"path": "payload.list", "equals": [1.0, 2]})).holds(&ev));
        assert!(!p(json!({"path": "payload.list", "equals": [1, 2, 3]})).holds(&ev));
    }

    #[test]
    fn substitution_and_masking() {
        let aliases = HashMap::from([("p".to_string(), "panel-3".to_string())]);
        let mut v = json!({"panel": "${p}", "nested": ["x${p}y"]});
        substitute(&mut v, &aliases).unwrap();
        assert_eq!(v, json!({"panel": "panel-3", "nested": ["xpanel-3y"]}));
        assert!(substitute(&mut json!("${q}"), &aliases).is_err());

        let a = "{\"kind\":\"x\",\"timing\":{\"elapsed_ms\":5}}\n";
        let b = "{\"kind\":\"x\",\"timing\":{\"elapsed_ms\":912}}\n";
        assert_ne!(a, b);
        assert_eq!(mask_trace(a), mask_trace(b));
        assert_eq!(mask_trace(a), "{\"kind\":\"x\"}\n");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Outcome::Passed.exit_code(), 0);
        assert_eq!(Outcome::AssertionFailed { step: 0, message: String::new() }.exit_code(), 1);
        assert_eq!(Outcome::EngineError { step: None, message: String::new() }.exit_code(), 2);
    }
}
