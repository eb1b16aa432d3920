//! Random widget panels for sync tests.

use std::fmt::Write;

use eui_engine::kernel::{KernelSession, SyncValue};
use eui_engine::llm::{AgentId, LlmGateway, Responder, StubBackend};
use eui_engine::notebook::{CellId, CodeContext};
use eui_engine::pipeline::{EphemeralUiHandle, Pipeline};
use eui_engine::widgets::{apply_event, snapshot_state, PanelRegistry, WidgetEvent, WidgetKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const KINDS: [WidgetKind; 6] = [
    WidgetKind::Slider,
    WidgetKind::NumberInput,
    WidgetKind::Dropdown,
    WidgetKind::Checkbox,
    WidgetKind::ColorPicker,
    WidgetKind::Textbox,
];

pub struct Generated {
    pub plan: String,
    pub coder: String,
    pub kinds: Vec<WidgetKind>,
}

fn py(v: &Value) -> String {
    match v {
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        other => other.to_string(),
    }
}

/// Random plan plus matching coder output with `n` widgets.
pub fn generate(rng: &mut ChaCha8Rng) -> Generated {
    let n = rng.random_range(1..=6);
    let mut elements = Vec::new();
    let mut globals = String::new();
    let mut widgets = String::new();
    let mut kinds = Vec::new();
    for id in 1..=n {
        let kind = KINDS[rng.random_range(0..KINDS.len())];
        kinds.push(kind);
        let label = format!("Widget {id}");
        let binding = format!("w{id}");
        let mut element = json!({"element_id": id, "name": label, "widget_kind": kind.as_str()});
        let initial = match kind {
            WidgetKind::Slider | WidgetKind::NumberInput => {
                element["range"] = json!({"min": 0, "max": 50, "step": 1});
                writeln!(widgets, "_eui.{}({id}, {label:?}, {binding:?}, min=0, max=50, step=1)", kind.as_str())
                    .unwrap();
                json!(0)
            }
            WidgetKind::Dropdown => {
                element["options"] = json!(["a", "b", "c"]);
                writeln!(widgets, "_eui.dropdown({id}, {label:?}, {binding:?}, options=['a', 'b', 'c'])").unwrap();
                json!("a")
            }
            WidgetKind::Checkbox => {
                writeln!(widgets, "_eui.checkbox({id}, {label:?}, {binding:?})").unwrap();
                json!(false)
            }
            WidgetKind::ColorPicker => {
                writeln!(widgets, "_eui.color_picker({id}, {label:?}, {binding:?})").unwrap();
                json!("#000000")
            }
            _ => {
                writeln!(widgets, "_eui.textbox({id}, {label:?}, {binding:?})").unwrap();
                json!("")
            }
        };
        writeln!(globals, "{binding} = {}", py(&initial)).unwrap();
        elements.push(element);
    }
    Generated {
        plan: json!({ "elements": elements }).to_string(),
        coder: format!("```python\n{globals}```\n\n```python\n{widgets}```"),
        kinds,
    }
}

pub fn valid_value(kind: WidgetKind, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        WidgetKind::Slider => json!(rng.random_range(0..=50)),
        WidgetKind::NumberInput => json!(rng.random_range(0.0..=50.0)),
        WidgetKind::Dropdown => json!(["a", "b", "c"][rng.random_range(0..3)]),
        WidgetKind::Checkbox => json!(rng.random_bool(0.5)),
        WidgetKind::ColorPicker => json!(format!("#{:06x}", rng.random_range(0..0x100_0000))),
        _ => {
            let len = rng.random_range(0..12);
            let pool = ['a', 'Z', ' ', '"', '\'', '\\', '\n', 'é', '{', '}', '0'];
            json!((0..len).map(|_| pool[rng.random_range(0..pool.len())]).collect::<String>())
        }
    }
}

pub fn invalid_value(kind: WidgetKind, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        WidgetKind::Slider | WidgetKind::NumberInput => {
            if rng.random_bool(0.5) {
                json!(rng.random_range(51..1000))
            } else {
                json!("10")
            }
        }
        WidgetKind::Dropdown => json!("z"),
        WidgetKind::Checkbox => json!(1),
        WidgetKind::ColorPicker => json!("orange"),
        _ => json!(42),
    }
}

pub fn same(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-9,
        _ => a == b,
    }
}

pub async fn render(kernel: &KernelSession, g: &Generated) -> EphemeralUiHandle {
    let stub = StubBackend::new()
        .with(AgentId::Advisor, Responder::Fixed("Adjust the settings.".into()))
        .with(AgentId::UiPlanner, Responder::Fixed(g.plan.clone()))
        .with(AgentId::UiCoder, Responder::Fixed(g.coder.clone()));
    let ctx = CodeContext { focal_code: String::new(), preamble: vec![], prompt_cell_id: CellId::new("ask") };
    Pipeline::with_defaults(LlmGateway::stub(stub)).run_ephemeral_ui("adjust", &ctx, kernel).await.unwrap()
}

/// Applies `events` in-order valid events spread over freshly generated
/// panels and compares a snapshot with the last value per widget after each
/// one. Returns the number of snapshots checked.
pub async fn in_order_fidelity(
    kernel: &KernelSession,
    rng: &mut ChaCha8Rng,
    events: usize,
    per_panel: usize,
) -> Result<usize, String> {
    let mut checked = 0;
    while checked < events {
        let g = generate(rng);
        let mut handle = render(kernel, &g).await;
        let mut registry = PanelRegistry::new();
        let live = handle.liveness();
        let panel_id = registry.replace_panel(&mut handle.payload, live);
        let mut expected: std::collections::BTreeMap<u32, Value> =
            handle.payload.manifest.widgets.iter().map(|w| (w.element_id, w.current_value.as_json().clone())).collect();
        for seq in 1..=per_panel.min(events - checked) as u64 {
            let element_id = rng.random_range(1..=g.kinds.len() as u32);
            let value = valid_value(g.kinds[element_id as usize - 1], rng);
            let event = WidgetEvent {
                panel_id: panel_id.clone(),
                element_id,
                value: SyncValue::new(value.clone()).map_err(|e| e.to_string())?,
                sequence_no: seq,
            };
            let panel = registry.panel_mut(&panel_id).map_err(|e| e.to_string())?;
            apply_event(panel, &event, kernel).await.map_err(|e| format!("event {seq} rejected: {e}"))?;
            expected.insert(element_id, value);
            let snap = snapshot_state(registry.panel(&panel_id).unwrap().manifest(), kernel)
                .await
                .map_err(|e| e.to_string())?;
            for entry in &snap.entries {
                let want = &expected[&entry.element_id];
                if !same(entry.value.as_json(), want) {
                    return Err(format!(
                        "element {}: kernel has {}, last event sent {want}",
                        entry.element_id, entry.value
                    ));
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}
