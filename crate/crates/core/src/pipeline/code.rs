use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use super::plan::UIPlan;
use crate::kernel::SyncValue;
use crate::widgets::{WidgetKind, WidgetStateSnapshot};

/// Bodies of the fenced code blocks in `text`, in order.
pub fn extract_code_blocks(text: &str) -> Vec<String> {
    static BLOCK: OnceLock<Regex> = OnceLock::new();
    let re = BLOCK.get_or_init(|| Regex::new(r"(?s)```[^\n`]*\n(.*?)```").expect("valid regex"));
    re.captures_iter(&text.replace("\r\n", "\n")).map(|c| c[1].trim_end().to_string()).collect()
}

/// The first fenced block if there is one, otherwise the whole trimmed text.
pub fn strip_fences(text: &str) -> String {
    match extract_code_blocks(text).into_iter().next() {
        Some(block) => block.trim_matches('\n').to_string(),
        None => text.trim().to_string(),
    }
}

fn json_literal(v: &Value) -> String {
    match v {
        Value::Null => "None".into(),
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => serde_json::to_string(s).expect("strings serialize"),
        Value::Array(items) => format!("[{}]", items.iter().map(json_literal).collect::<Vec<_>>().join(", ")),
        Value::Object(_) => unreachable!("sync values are flat"),
    }
}

/// Python source literal for a synced value.
pub fn python_literal(value: &SyncValue) -> String {
    json_literal(value.as_json())
}

/// The `{widget_state}` text given to the code injector: one line per widget.
pub fn describe_state(state: &WidgetStateSnapshot) -> String {
    let mut out = String::new();
    for entry in &state.entries {
        let _ = writeln!(out, "- {}: {}", entry.label, python_literal(&entry.value));
    }
    out.trim_end().to_string()
}

fn default_value(element: &super::plan::UIPlanElement) -> String {
    match element.widget_kind {
        WidgetKind::Slider | WidgetKind::NumberInput => {
            let min = element.range.map(|r| r.min).unwrap_or(0.0);
            json_literal(&serde_json::json!(min))
        }
        WidgetKind::Dropdown => {
            let first = element.options.as_ref().and_then(|o| o.first()).cloned().unwrap_or_default();
            json_literal(&Value::String(first))
        }
        WidgetKind::Checkbox => "False".into(),
        WidgetKind::ColorPicker => "\"#1f77b4\"".into(),
        WidgetKind::Textbox => "\"\"".into(),
        WidgetKind::ImageGallery => "[]".into(),
    }
}

/// A well-formed UI coder response for `plan`, using the model-side names
/// `ui_<element_id>`. Handy as a stub responder.
pub fn reference_ui_code(plan: &UIPlan) -> String {
    let mut globals = String::new();
    let mut widgets = String::new();
    for e in &plan.elements {
        let name = format!("ui_{}", e.element_id);
        let _ = writeln!(globals, "{name} = {}", default_value(e));
        let label = serde_json::to_string(&e.name).expect("strings serialize");
        let description = serde_json::to_string(&e.description).expect("strings serialize");
        let extra = match e.widget_kind {
            WidgetKind::Slider | WidgetKind::NumberInput => {
                let r = e.range.expect("validated plan");
                format!(
                    ", min={}, max={}, step={}",
                    json_literal(&serde_json::json!(r.min)),
                    json_literal(&serde_json::json!(r.max)),
                    json_literal(&serde_json::json!(r.step))
                )
            }
            WidgetKind::Dropdown => {
                let opts: Vec<Value> = e.options.clone().unwrap_or_default().into_iter().map(Value::String).collect();
                format!(", options={}", json_literal(&Value::Array(opts)))
            }
            _ => String::new(),
        };
        let _ = writeln!(
            widgets,
            "_eui.{}({}, {label}, \"{name}\"{extra}, description={description})",
            e.widget_kind, e.element_id
        );
    }
    format!("```python\n{globals}```\n\n```python\n{widgets}```\n")
}
